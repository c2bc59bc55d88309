#include "moaserve/topology.hpp"

#include <algorithm>
#include <numeric>

namespace moaserve {

std::string to_string(TopologyKind kind) {
  return kind == TopologyKind::Tree ? "tree" : "all_to_all";
}

TopologyKind topology_kind_from_string(const std::string& s) {
  if (s == "tree") return TopologyKind::Tree;
  if (s == "all_to_all") return TopologyKind::AllToAll;
  throw ValidationError("topology.kind: expected 'tree' or 'all_to_all', got '" + s + "'");
}

namespace {

void check_widths(const std::vector<int>& widths) {
  if (widths.empty()) throw ValidationError("topology: widths must be non-empty");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] <= 0) {
      throw ValidationError("topology: layer " + std::to_string(i + 1) +
                            " has non-positive width " + std::to_string(widths[i]));
    }
  }
}

std::vector<std::vector<AgentId>> make_layers(const std::vector<int>& widths) {
  std::vector<std::vector<AgentId>> layers(widths.size());
  for (std::size_t l = 0; l < widths.size(); ++l) {
    layers[l].reserve(static_cast<std::size_t>(widths[l]));
    for (int j = 0; j < widths[l]; ++j) {
      layers[l].push_back(AgentId{static_cast<int>(l) + 1, j});
    }
  }
  return layers;
}

}  // namespace

Topology Topology::tree(const std::vector<int>& widths, const std::vector<int>& branching) {
  check_widths(widths);
  if (branching.size() + 1 != widths.size()) {
    throw ValidationError("topology: expected " + std::to_string(widths.size() - 1) +
                          " branching factors for " + std::to_string(widths.size()) +
                          " layers, got " + std::to_string(branching.size()));
  }
  std::vector<std::vector<int>> cluster_sizes(branching.size());
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    int b = branching[l];
    if (b <= 0) {
      throw ValidationError("topology: branching factor for layer " + std::to_string(l + 2) +
                            " must be positive");
    }
    if (widths[l + 1] * b != widths[l]) {
      // Name the layer whose width cannot be partitioned.
      throw ValidationError("topology: layer " + std::to_string(l + 2) + " width " +
                            std::to_string(widths[l + 1]) + " times branching " +
                            std::to_string(b) + " does not cover layer " +
                            std::to_string(l + 1) + " width " + std::to_string(widths[l]));
    }
    cluster_sizes[l].assign(static_cast<std::size_t>(widths[l + 1]), b);
  }
  return tree_custom(widths, cluster_sizes);
}

Topology Topology::tree_custom(const std::vector<int>& widths,
                               const std::vector<std::vector<int>>& cluster_sizes) {
  check_widths(widths);
  if (cluster_sizes.size() + 1 != widths.size()) {
    throw ValidationError("topology: expected cluster sizes for " +
                          std::to_string(widths.size() - 1) + " layer transitions, got " +
                          std::to_string(cluster_sizes.size()));
  }
  Topology t;
  t.kind_ = TopologyKind::Tree;
  t.layers_ = make_layers(widths);
  t.cluster_sizes_ = cluster_sizes;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto& sizes = cluster_sizes[l];
    if (sizes.size() != static_cast<std::size_t>(widths[l + 1])) {
      throw ValidationError("topology: layer " + std::to_string(l + 2) + " has " +
                            std::to_string(widths[l + 1]) + " agents but " +
                            std::to_string(sizes.size()) + " cluster sizes");
    }
    int total = 0;
    for (int s : sizes) {
      if (s <= 0) {
        throw ValidationError("topology: layer " + std::to_string(l + 2) +
                              " has a non-positive cluster size");
      }
      total += s;
    }
    if (total != widths[l]) {
      throw ValidationError("topology: layer " + std::to_string(l + 2) + " cluster sizes sum to " +
                            std::to_string(total) + " but layer " + std::to_string(l + 1) +
                            " has width " + std::to_string(widths[l]));
    }
  }
  t.index();
  return t;
}

Topology Topology::all_to_all(const std::vector<int>& widths) {
  check_widths(widths);
  Topology t;
  t.kind_ = TopologyKind::AllToAll;
  t.layers_ = make_layers(widths);
  t.index();
  return t;
}

void Topology::index() {
  precursors_.clear();
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (l == 0) {
      for (const auto& a : layers_[0]) precursors_[a] = {};
      continue;
    }
    if (kind_ == TopologyKind::AllToAll) {
      for (const auto& a : layers_[l]) precursors_[a] = layers_[l - 1];
    } else {
      // Contiguous assignment: cluster j covers the next cluster_sizes[j]
      // positions of the previous layer.
      int cursor = 0;
      const auto& sizes = cluster_sizes_[l - 1];
      for (std::size_t j = 0; j < layers_[l].size(); ++j) {
        std::vector<AgentId> cluster;
        cluster.reserve(static_cast<std::size_t>(sizes[j]));
        for (int k = 0; k < sizes[j]; ++k) cluster.push_back(layers_[l - 1][cursor++]);
        precursors_[layers_[l][j]] = std::move(cluster);
      }
    }
  }
  for (const auto& layer : layers_) {
    for (const auto& a : layer) {
      profiles_.emplace(a, AgentProfile{});
    }
  }
}

std::size_t Topology::agent_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.size();
  return n;
}

const std::vector<AgentId>& Topology::layer(int l) const {
  if (l < 1 || l > depth()) {
    throw ValidationError("topology: layer " + std::to_string(l) + " out of range [1, " +
                          std::to_string(depth()) + "]");
  }
  return layers_[static_cast<std::size_t>(l - 1)];
}

bool Topology::contains(const AgentId& a) const { return precursors_.count(a) > 0; }

const std::vector<AgentId>& Topology::precursors(const AgentId& a) const {
  auto it = precursors_.find(a);
  if (it == precursors_.end()) {
    throw ValidationError("topology: unknown agent " + a.str());
  }
  return it->second;
}

std::vector<AgentId> Topology::successors(const AgentId& a) const {
  std::vector<AgentId> out;
  if (a.layer >= depth()) return out;
  for (const auto& b : layers_[static_cast<std::size_t>(a.layer)]) {
    const auto& pre = precursors(b);
    if (std::find(pre.begin(), pre.end(), a) != pre.end()) out.push_back(b);
  }
  return out;
}

std::vector<std::vector<AgentId>> Topology::clusters_of_layer(int l) const {
  if (l < 2 || l > depth()) {
    throw ValidationError("topology: clusters_of_layer expects a layer in [2, " +
                          std::to_string(depth()) + "], got " + std::to_string(l));
  }
  std::vector<std::vector<AgentId>> out;
  out.reserve(layers_[static_cast<std::size_t>(l - 1)].size());
  for (const auto& a : layers_[static_cast<std::size_t>(l - 1)]) out.push_back(precursors(a));
  return out;
}

const AgentId& Topology::root() const {
  const auto& last = layers_.back();
  if (last.size() != 1) {
    throw ValidationError("topology: last layer has width " + std::to_string(last.size()) +
                          "; a single aggregator is required");
  }
  return last.front();
}

const AgentProfile& Topology::profile(const AgentId& a) const {
  auto it = profiles_.find(a);
  if (it == profiles_.end()) throw ValidationError("topology: unknown agent " + a.str());
  return it->second;
}

void Topology::assign_profile(const AgentId& a, AgentProfile p) {
  auto it = profiles_.find(a);
  if (it == profiles_.end()) throw ValidationError("topology: unknown agent " + a.str());
  p.validate("profile for agent " + a.str());
  it->second = std::move(p);
}

void Topology::assign_profiles(const std::map<AgentId, AgentProfile>& profiles) {
  for (const auto& [a, p] : profiles) assign_profile(a, p);
}

nlohmann::ordered_json Topology::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = to_string(kind_);
  std::vector<int> widths;
  for (const auto& layer : layers_) widths.push_back(static_cast<int>(layer.size()));
  j["widths"] = widths;
  if (kind_ == TopologyKind::Tree) j["cluster_sizes"] = cluster_sizes_;
  nlohmann::ordered_json profs = nlohmann::ordered_json::object();
  for (const auto& [a, p] : profiles_) {
    nlohmann::ordered_json pj;
    pj["model_tag"] = p.model_tag;
    pj["prefill_rate"] = p.prefill_rate;
    pj["decode_rate"] = p.decode_rate;
    switch (p.output_len.kind) {
      case OutputLenDist::Kind::Fixed:
        pj["output_len"] = {{"kind", "fixed"}, {"tokens", p.output_len.fixed}};
        break;
      case OutputLenDist::Kind::Uniform:
        pj["output_len"] = {{"kind", "uniform"}, {"min", p.output_len.lo}, {"max", p.output_len.hi}};
        break;
      case OutputLenDist::Kind::Empirical:
        pj["output_len"] = {{"kind", "empirical"}, {"values", p.output_len.values}};
        break;
    }
    pj["conf_logprob_mu"] = p.conf_logprob_mu;
    pj["conf_logprob_sigma"] = p.conf_logprob_sigma;
    pj["semantic_overlap"] = p.semantic_overlap;
    profs[a.str()] = std::move(pj);
  }
  j["profiles"] = std::move(profs);
  return j;
}

Topology Topology::from_json(const nlohmann::ordered_json& j) {
  if (!j.contains("kind") || !j.contains("widths")) {
    throw ValidationError("topology: json needs 'kind' and 'widths'");
  }
  TopologyKind kind = topology_kind_from_string(j.at("kind").get<std::string>());
  std::vector<int> widths = j.at("widths").get<std::vector<int>>();
  Topology t;
  if (kind == TopologyKind::AllToAll) {
    t = all_to_all(widths);
  } else if (j.contains("cluster_sizes")) {
    t = tree_custom(widths, j.at("cluster_sizes").get<std::vector<std::vector<int>>>());
  } else if (j.contains("branching")) {
    t = tree(widths, j.at("branching").get<std::vector<int>>());
  } else {
    throw ValidationError("topology: tree json needs 'cluster_sizes' or 'branching'");
  }
  if (j.contains("profiles")) {
    for (const auto& [key, pj] : j.at("profiles").items()) {
      AgentId a = AgentId::parse(key);
      AgentProfile p;
      p.model_tag = pj.value("model_tag", p.model_tag);
      p.prefill_rate = pj.value("prefill_rate", p.prefill_rate);
      p.decode_rate = pj.value("decode_rate", p.decode_rate);
      if (pj.contains("output_len")) {
        const auto& oj = pj.at("output_len");
        std::string k = oj.value("kind", "fixed");
        if (k == "fixed") {
          p.output_len = OutputLenDist::fixed_len(oj.value("tokens", 128));
        } else if (k == "uniform") {
          p.output_len = OutputLenDist::uniform(oj.value("min", 1), oj.value("max", 1));
        } else if (k == "empirical") {
          p.output_len = OutputLenDist::empirical(oj.at("values").get<std::vector<int>>());
        } else {
          throw ValidationError("profile " + key + ".output_len.kind: unknown kind '" + k + "'");
        }
      }
      p.conf_logprob_mu = pj.value("conf_logprob_mu", p.conf_logprob_mu);
      p.conf_logprob_sigma = pj.value("conf_logprob_sigma", p.conf_logprob_sigma);
      p.semantic_overlap = pj.value("semantic_overlap", p.semantic_overlap);
      t.assign_profile(a, std::move(p));
    }
  }
  return t;
}

bool Topology::operator==(const Topology& other) const {
  return kind_ == other.kind_ && layers_ == other.layers_ &&
         cluster_sizes_ == other.cluster_sizes_ && precursors_ == other.precursors_ &&
         profiles_ == other.profiles_;
}

double layer_latency_all(std::span<const double> times) {
  double m = 0.0;
  for (double t : times) m = std::max(m, t);
  return m;
}

LayerReadiness layer_latency_tree(const std::map<AgentId, double>& times,
                                  const std::vector<std::vector<AgentId>>& clusters) {
  LayerReadiness r;
  r.per_successor.reserve(clusters.size());
  for (const auto& cluster : clusters) {
    double m = 0.0;
    for (const auto& a : cluster) {
      auto it = times.find(a);
      if (it == times.end()) {
        throw ValidationError("layer_latency_tree: missing time for agent " + a.str());
      }
      m = std::max(m, it->second);
    }
    r.per_successor.push_back(m);
    r.layer_latency = std::max(r.layer_latency, m);
  }
  return r;
}

double critical_path(const Topology& topo, const std::map<AgentId, double>& agent_time) {
  std::map<AgentId, double> finish;
  double total = 0.0;
  for (const auto& layer : topo.layers()) {
    for (const auto& a : layer) {
      auto it = agent_time.find(a);
      if (it == agent_time.end()) {
        throw ValidationError("critical_path: missing time for agent " + a.str());
      }
      double ready = 0.0;
      for (const auto& p : topo.precursors(a)) ready = std::max(ready, finish.at(p));
      finish[a] = ready + it->second;
      total = std::max(total, finish[a]);
    }
  }
  return total;
}

}  // namespace moaserve
