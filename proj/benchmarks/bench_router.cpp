// Incremental routing throughput: streaming precursor chunks through a
// slot-filling plan and draining the issued prefill actions.

#include <benchmark/benchmark.h>

#include <vector>

#include "moaserve/prompt.hpp"
#include "moaserve/router.hpp"
#include "moaserve/scenario.hpp"

namespace {

using namespace moaserve;

// One full plan lifecycle: prefix flush, 3 precursors streaming 512 tokens
// each in 32-token chunks, slot closures, suffix, and the final generate.
void BM_route_stream(benchmark::State& state) {
  const int chunk = 32;
  const int out_tokens = 512;
  std::vector<AgentId> precursors{{1, 0}, {1, 1}, {1, 2}};

  TokenSeq prefix = synth_tokens(3, "prefix", 96);
  TokenSeq sep = synth_tokens(3, "sep", 4);
  TokenSeq suffix = synth_tokens(3, "suffix", 32);
  std::vector<TokenSeq> outputs;
  for (int i = 0; i < 3; ++i) {
    outputs.push_back(synth_tokens(3, "out:" + std::to_string(i), out_tokens));
  }

  std::vector<SlotSpec> slots;
  for (const auto& p : precursors) slots.push_back(SlotSpec{p, sep});
  PromptTemplate tmpl(prefix, slots, suffix);

  std::int64_t actions_issued = 0;
  for (auto _ : state) {
    SlotPlan plan(AgentId{2, 0}, tmpl, /*incremental=*/true);
    auto drain = [&](const std::vector<RouteAction>& acts) {
      actions_issued += static_cast<std::int64_t>(acts.size());
      for (const auto& a : acts) benchmark::DoNotOptimize(a.tokens.size());
    };
    drain(plan.start());
    for (int i = 0; i < 3; ++i) {
      for (int b = 0; b < out_tokens; b += chunk) {
        TokenSeq piece(outputs[static_cast<std::size_t>(i)].begin() + b,
                       outputs[static_cast<std::size_t>(i)].begin() + b + chunk);
        drain(plan.on_chunk(precursors[static_cast<std::size_t>(i)], piece));
      }
      drain(plan.on_precursor_done(precursors[static_cast<std::size_t>(i)]));
    }
    benchmark::DoNotOptimize(plan.final_prompt().size());
  }
  state.SetItemsProcessed(state.iterations() * 3 * out_tokens);
  state.counters["actions"] = static_cast<double>(actions_issued) /
                              static_cast<double>(state.iterations());
}

}  // namespace

BENCHMARK(BM_route_stream);
