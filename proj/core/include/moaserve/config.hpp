#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moaserve/orchestrator.hpp"

namespace moaserve {

// Complete study configuration: named serving profiles, their assignment
// over the tree and the all-to-all baseline, run parameters, the embedding
// provider, and the comparison sizes.
//
// JSON schema (all objects reject unknown keys, errors carry the full field
// path):
//   {
//     "topology":     {"widths": [9,3,1], "branching": [3,3]},
//     "profiles":     {"<name>": {"prefill_rate": ..., "decode_rate": ...,
//                                 "output_len": {"kind": "fixed"|"uniform"|"empirical", ...},
//                                 "conf_logprob_mu": ..., "conf_logprob_sigma": ...,
//                                 "semantic_overlap": ...}, ...},
//     "assignment":   {"layers": [["4B","8B","32B"], ["agg-mid"], ["agg-root"]],
//                      "overrides": {"1:4": "32B"}},
//     "run":          {"mode": ..., "early_exit": ..., "exit_scope": ..., "tau": ...,
//                      "include_diagonal": ..., "ee_eval_latency": ..., "force_q": ...,
//                      "chunk_size": ..., "seed": ..., "repetitions": ...,
//                      "query_tokens": ..., "leaf_prefix_tokens": ..., "agg_prefix_tokens": ...,
//                      "separator_tokens": ..., "suffix_tokens": ...,
//                      "prefill_startup_overhead": ..., "kv_transfer_per_block": ...,
//                      "kv_block_tokens": ...},
//     "provider":     {"kind": "mock"|"file"|"remote", ...},
//     "ablation":     {"samples": 24, "all_to_all_widths": [9,9,1]},
//     "second_layer": {"samples": ..., "precursors": ..., ...}
//   }
//
// Every field is optional and defaults to the calibrated preset value; an
// absent config file means preset() verbatim.
struct AppConfig {
  std::vector<int> widths{9, 3, 1};
  std::vector<int> branching{3, 3};
  std::vector<std::vector<int>> cluster_sizes;  // overrides branching when set

  std::map<std::string, AgentProfile> profiles;
  // Per-layer name cycles: agent (l, j) gets layers[min(l-1, last)][j % size].
  std::vector<std::vector<std::string>> layer_assignment;
  std::map<std::string, std::string> overrides;  // "layer:position" -> name

  RunConfig run;  // run.topology is derived from the shape fields by finalize()
  std::vector<int> all_to_all_widths{9, 9, 1};
  int ablation_samples = 24;
  SecondLayerConfig second_layer;

  // The calibrated 9-3-1 default: one fast, one medium, one slow profile per
  // leaf cluster and slow-prefill aggregator layers.
  static AppConfig preset();

  static AppConfig from_json(const nlohmann::ordered_json& j);
  static AppConfig load_file(const std::string& path);
  nlohmann::ordered_json to_json() const;

  const std::string& profile_name_for(int layer, int position) const;

  Topology tree_topology() const;
  Topology all_to_all_topology() const;

  // Rebuilds run.topology from the shape fields and validates everything;
  // call after mutating any field (from_json does it for you).
  void finalize();
};

}  // namespace moaserve
