// Event-loop throughput: one simulated fan-in query (9 proposers feeding a
// single aggregator) per iteration, under the cheapest and the most
// event-heavy schedule modes.

#include <benchmark/benchmark.h>

#include "moaserve/pdsim.hpp"
#include "moaserve/scenario.hpp"

namespace {

using namespace moaserve;

Scenario fan_in_scenario() {
  Scenario s;
  s.chunk_size = 32;
  s.seed = 42;

  EngineSpec proposer;
  proposer.prefill_rate = 8000.0;
  proposer.decode_rate = 80.0;
  proposer.kv_transfer_per_block = 0.004;
  proposer.kv_block_tokens = 16;

  EngineSpec aggregator = proposer;
  aggregator.prefill_rate = 800.0;
  aggregator.decode_rate = 50.0;

  ScenarioAgent agg;
  agg.id = AgentId{2, 0};
  agg.engine = aggregator;
  agg.prefix_tokens = 96;
  agg.suffix_tokens = 32;
  agg.output_len = OutputLenDist::fixed_len(192);

  for (int j = 0; j < 9; ++j) {
    ScenarioAgent a;
    a.id = AgentId{1, j};
    a.engine = proposer;
    a.prompt_tokens = 256;
    a.output_len = OutputLenDist::fixed_len(512);
    agg.deps.push_back(a.id);
    s.agents.push_back(std::move(a));
  }
  s.agents.push_back(std::move(agg));
  return s;
}

void BM_simulate_fan_in(benchmark::State& state) {
  Scenario s = fan_in_scenario();
  ScheduleMode mode = state.range(0) == 0 ? ScheduleMode::SequentialPd
                                          : ScheduleMode::IncrementalOverlap;
  for (auto _ : state) {
    RunTrace t = run_scenario(s, mode);
    benchmark::DoNotOptimize(t.e2e_latency);
  }
}

}  // namespace

BENCHMARK(BM_simulate_fan_in)
    ->Arg(0)
    ->Arg(1)
    ->ArgName("incremental");
