// Quality-score throughput: incremental group scoring with a memoized mock
// embedding provider, and the raw similarity kernel over gram matrices.

#include <benchmark/benchmark.h>

#include <vector>

#include <Eigen/Dense>

#include "moaserve/embedding.hpp"
#include "moaserve/metricq.hpp"
#include "moaserve/rng.hpp"
#include "moaserve/scenario.hpp"

namespace {

using namespace moaserve;

// Scores a full completion group of `n` outputs (64 tokens each) from
// scratch; embeddings are memoized so the algebra dominates after the first
// iteration.
void BM_score_group(benchmark::State& state) {
  int n = static_cast<int>(state.range(0));
  ProviderSpec spec;
  spec.kind = ProviderSpec::Kind::DeterministicMock;
  spec.hidden = 64;
  spec.seed = 7;
  spec.memoize = true;
  auto provider = make_provider(spec);

  std::vector<TokenSeq> outputs;
  std::vector<TokenLogProbs> lps;
  RngStream rng(11);
  for (int i = 0; i < n; ++i) {
    outputs.push_back(synth_tokens(7, "bench:" + std::to_string(i), 64));
    TokenLogProbs lp;
    for (int t = 0; t < 64; ++t) lp.values.push_back(-1.5 * rng.next_uniform());
    lps.push_back(std::move(lp));
  }

  for (auto _ : state) {
    QualityScore qs = score_outputs(outputs, lps, *provider);
    benchmark::DoNotOptimize(qs.q);
  }
  state.SetItemsProcessed(state.iterations() * n);
}

// One pairwise similarity over h x h gram matrices: correlation
// normalization plus the Frobenius cosine.
void BM_similarity_kernel(benchmark::State& state) {
  int h = static_cast<int>(state.range(0));
  RngStream rng(23);
  Eigen::MatrixXd eu(96, h), ev(96, h);
  for (int r = 0; r < 96; ++r) {
    for (int c = 0; c < h; ++c) {
      eu(r, c) = rng.next_gaussian(0.0, 1.0);
      ev(r, c) = rng.next_gaussian(0.0, 1.0);
    }
  }
  Eigen::MatrixXd gu = eu.transpose() * eu;
  Eigen::MatrixXd gv = ev.transpose() * ev;

  for (auto _ : state) {
    benchmark::DoNotOptimize(frob_cos_sim(gu, gv, 1e-12));
  }
}

}  // namespace

BENCHMARK(BM_score_group)->Arg(2)->Arg(4)->Arg(9);
BENCHMARK(BM_similarity_kernel)->Arg(16)->Arg(64)->Arg(128);

BENCHMARK_MAIN();
