#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moaserve/agent.hpp"

namespace moaserve {

enum class TopologyKind { Tree, AllToAll };

std::string to_string(TopologyKind kind);
TopologyKind topology_kind_from_string(const std::string& s);

// Layered agent graph. Layer 1 agents are independent proposers; an agent in
// layer l > 1 reads the outputs of its precursor set C(a) in layer l - 1.
//
//  - Tree: layer l - 1 is partitioned into disjoint clusters, one per layer-l
//    agent, assigned contiguously by position.
//  - AllToAll: every layer-l agent has the whole previous layer as precursors.
//
// Instances are immutable after construction; all factories validate and
// throw ValidationError with the offending layer named.
class Topology {
 public:
  // branching[l-1] = cluster size feeding each layer l+1 agent; every layer
  // must divide evenly (widths[l] * branching[l-1] == widths[l-1]).
  static Topology tree(const std::vector<int>& widths, const std::vector<int>& branching);

  // Uneven clusters: cluster_sizes[l-1][j] = |C(a_{l+1,j})|; sizes of each
  // list must sum to widths[l-1].
  static Topology tree_custom(const std::vector<int>& widths,
                              const std::vector<std::vector<int>>& cluster_sizes);

  static Topology all_to_all(const std::vector<int>& widths);

  TopologyKind kind() const { return kind_; }
  int depth() const { return static_cast<int>(layers_.size()); }
  std::size_t agent_count() const;
  const std::vector<std::vector<AgentId>>& layers() const { return layers_; }
  const std::vector<AgentId>& layer(int l) const;  // 1-based

  bool contains(const AgentId& a) const;
  // Precursor set C(a); empty for layer-1 agents.
  const std::vector<AgentId>& precursors(const AgentId& a) const;
  // Agents whose precursor set contains a.
  std::vector<AgentId> successors(const AgentId& a) const;

  // One entry per layer-l agent (l >= 2), in position order: its precursor
  // cluster. For all-to-all graphs every entry is the whole previous layer.
  std::vector<std::vector<AgentId>> clusters_of_layer(int l) const;

  // The single agent of the last layer; throws if the last layer is wider.
  const AgentId& root() const;

  const AgentProfile& profile(const AgentId& a) const;
  void assign_profile(const AgentId& a, AgentProfile p);
  void assign_profiles(const std::map<AgentId, AgentProfile>& profiles);

  nlohmann::ordered_json to_json() const;
  static Topology from_json(const nlohmann::ordered_json& j);

  bool operator==(const Topology& other) const;

 private:
  Topology() = default;
  void index();

  TopologyKind kind_ = TopologyKind::Tree;
  std::vector<std::vector<AgentId>> layers_;
  // cluster_sizes_[l-1] describes the partition of layer l feeding layer l+1
  // (tree only; empty for all-to-all).
  std::vector<std::vector<int>> cluster_sizes_;
  std::map<AgentId, std::vector<AgentId>> precursors_;
  std::map<AgentId, AgentProfile> profiles_;
};

// Layer latency when every layer-(l+1) agent waits for the whole layer:
// the slowest agent gates everyone.
double layer_latency_all(std::span<const double> times);

struct LayerReadiness {
  std::vector<double> per_successor;  // max over each successor's own cluster
  double layer_latency = 0.0;         // max over successors
};

// Layer latency under clustering: each successor waits only for its own
// precursor cluster, so one straggler delays exactly one successor.
LayerReadiness layer_latency_tree(const std::map<AgentId, double>& times,
                                  const std::vector<std::vector<AgentId>>& clusters);

// Closed-form end-to-end latency: each agent starts as soon as all of its
// precursors finished, so the answer is the longest dependency path.
double critical_path(const Topology& topo, const std::map<AgentId, double>& agent_time);

}  // namespace moaserve
