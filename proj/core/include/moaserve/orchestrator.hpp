#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moaserve/embedding.hpp"
#include "moaserve/metricq.hpp"
#include "moaserve/scenario.hpp"
#include "moaserve/topology.hpp"
#include "moaserve/trace.hpp"

namespace moaserve {

// Which completions one quality evaluation covers: the precursor cluster of
// a single successor (default) or the whole layer.
enum class ExitScope { Cluster, Layer };

std::string to_string(ExitScope s);
ExitScope exit_scope_from_string(const std::string& s);

// Everything needed to run one full query over a topology.
struct RunConfig {
  Topology topology = Topology::tree({1}, {});
  ScheduleMode mode = ScheduleMode::SequentialPd;
  bool early_exit = false;
  ExitScope exit_scope = ExitScope::Cluster;
  double tau = kDefaultTau;
  bool include_diagonal = true;
  double ee_eval_latency = 0.0;       // seconds charged per quality evaluation
  std::optional<double> force_q;      // fixture override of the exit probability
  int chunk_size = 32;
  std::uint64_t seed = 0;
  int repetitions = 1;

  // Prompt shape (token counts; content is synthesized from the seed).
  int query_tokens = 256;
  int leaf_prefix_tokens = 64;
  int agg_prefix_tokens = 96;
  int separator_tokens = 0;
  int suffix_tokens = 32;

  // Engine-model parameters applied to every agent (rates come from the
  // per-agent profiles).
  double prefill_startup_overhead = 0.0;
  double kv_transfer_per_block = 0.0;
  int kv_block_tokens = 16;

  ProviderSpec provider;

  void validate() const;
  std::string mode_label() const;
};

// One simulated query; sample_index varies the synthetic content and the
// exit draws while the config stays fixed.
RunTrace run_query(const RunConfig& cfg, int sample_index = 0);

std::vector<RunTrace> run_repetitions(const RunConfig& cfg);

struct RunSummary {
  std::string mode_label;
  int samples = 0;
  double mean_e2e = 0.0;
  double p50_e2e = 0.0;
  double p95_e2e = 0.0;
  double mean_ee_share = 0.0;
  double mean_prefill_only_calls = 0.0;
  double mean_recomputed_tokens = 0.0;
  // Prefill share of the completion-critical path, averaged over samples.
  double prefill_share = 0.0;
  std::map<std::string, ModelActivation> activation_counts;
  std::map<std::string, double> activation;  // invoked / (instances * samples)

  nlohmann::ordered_json to_json() const;
};

RunSummary summarize(const RunConfig& cfg, const std::vector<RunTrace>& traces);

// Prefill seconds spent on the chain of latest-completing precursors ending
// at the root, divided by E2E latency.
double critical_path_prefill_share(const Topology& topo, const RunTrace& trace);

// The four-setting comparison. Settings, in order: all-to-all baseline,
// tree-only, tree + overlap, fully integrated (tree + overlap + early exit).
struct AblationRow {
  std::string setting;
  int samples = 0;
  double mean_e2e = 0.0;
  double p50_e2e = 0.0;
  double p95_e2e = 0.0;
  // Mean over samples of e2e / e2e_of_all_to_all_on_same_sample.
  double normalized_mean = 1.0;
  double mean_ee_share = 0.0;
  std::map<std::string, double> activation;
  std::string accuracy = "excluded";  // needs real model inference
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string to_csv() const;
  nlohmann::ordered_json to_json() const;
};

AblationTable run_ablation(const RunConfig& tree_base, const Topology& all_to_all, int samples);

// Single-aggregator schedule-mode study: precursor outputs with randomized
// lengths feed one dependent agent; the four modes are compared.
struct SecondLayerConfig {
  int samples = 40;
  std::uint64_t seed = 0;
  int precursors = 3;
  int out_min = 1;
  int out_max = 2048;
  double precursor_decode_rate = 400.0;
  double precursor_prefill_rate = 4000.0;
  int precursor_prompt_tokens = 256;
  double agg_prefill_rate = 800.0;
  double agg_decode_rate = 50.0;
  int agg_prefix_tokens = 128;
  int agg_suffix_tokens = 32;
  int agg_output_tokens = 192;
  int chunk_size = 32;
  double kv_transfer_per_block = 0.004;
  int kv_block_tokens = 16;
  double prefill_startup_overhead = 0.0;

  void validate() const;
};

struct SecondLayerRow {
  ScheduleMode mode;
  double mean_e2e = 0.0;
  double normalized_vs_sequential = 1.0;
};

std::vector<SecondLayerRow> run_second_layer_study(const SecondLayerConfig& cfg);
std::string second_layer_csv(const std::vector<SecondLayerRow>& rows);

}  // namespace moaserve
