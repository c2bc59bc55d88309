#include "moaserve/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "moaserve/errors.hpp"

namespace moaserve {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  throw ValidationError("config: " + path + ": " + what);
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&key](const char* a) { return key == a; }) == allowed.end()) {
      bad(path, "unknown field '" + key + "'");
    }
  }
}

const json* find(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double get_double(const json& j, const std::string& path, const char* key, double dflt) {
  const json* v = find(j, key);
  if (!v) return dflt;
  if (!v->is_number()) bad(path + "." + key, "expected a number");
  return v->get<double>();
}

int get_int(const json& j, const std::string& path, const char* key, int dflt) {
  const json* v = find(j, key);
  if (!v) return dflt;
  if (!v->is_number_integer()) bad(path + "." + key, "expected an integer");
  return v->get<int>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const char* key,
                      std::uint64_t dflt) {
  const json* v = find(j, key);
  if (!v) return dflt;
  if (!v->is_number_integer() && !v->is_number_unsigned()) {
    bad(path + "." + key, "expected an integer");
  }
  return v->get<std::uint64_t>();
}

bool get_bool(const json& j, const std::string& path, const char* key, bool dflt) {
  const json* v = find(j, key);
  if (!v) return dflt;
  if (!v->is_boolean()) bad(path + "." + key, "expected a boolean");
  return v->get<bool>();
}

std::string get_string(const json& j, const std::string& path, const char* key,
                       const std::string& dflt) {
  const json* v = find(j, key);
  if (!v) return dflt;
  if (!v->is_string()) bad(path + "." + key, "expected a string");
  return v->get<std::string>();
}

std::vector<int> get_int_list(const json& v, const std::string& path) {
  if (!v.is_array()) bad(path, "expected an array of integers");
  std::vector<int> out;
  for (const auto& e : v) {
    if (!e.is_number_integer()) bad(path, "expected an array of integers");
    out.push_back(e.get<int>());
  }
  return out;
}

OutputLenDist parse_output_len(const json& v, const std::string& path) {
  if (!v.is_object()) bad(path, "expected an object");
  check_keys(v, path, {"kind", "tokens", "min", "max", "values"});
  std::string kind = get_string(v, path, "kind", "fixed");
  if (kind == "fixed") return OutputLenDist::fixed_len(get_int(v, path, "tokens", 128));
  if (kind == "uniform") {
    return OutputLenDist::uniform(get_int(v, path, "min", 1), get_int(v, path, "max", 1));
  }
  if (kind == "empirical") {
    const json* values = find(v, "values");
    if (!values) bad(path, "empirical output_len needs 'values'");
    return OutputLenDist::empirical(get_int_list(*values, path + ".values"));
  }
  bad(path + ".kind", "expected 'fixed', 'uniform' or 'empirical'");
}

json output_len_to_json(const OutputLenDist& d) {
  switch (d.kind) {
    case OutputLenDist::Kind::Fixed:
      return {{"kind", "fixed"}, {"tokens", d.fixed}};
    case OutputLenDist::Kind::Uniform:
      return {{"kind", "uniform"}, {"min", d.lo}, {"max", d.hi}};
    case OutputLenDist::Kind::Empirical:
      return {{"kind", "empirical"}, {"values", d.values}};
  }
  return {{"kind", "fixed"}, {"tokens", d.fixed}};
}

AgentProfile parse_profile(const json& v, const std::string& name, const std::string& path,
                           const AgentProfile& base) {
  if (!v.is_object()) bad(path, "expected an object");
  check_keys(v, path,
             {"prefill_rate", "decode_rate", "output_len", "conf_logprob_mu",
              "conf_logprob_sigma", "semantic_overlap"});
  AgentProfile p = base;
  p.model_tag = name;
  p.prefill_rate = get_double(v, path, "prefill_rate", p.prefill_rate);
  p.decode_rate = get_double(v, path, "decode_rate", p.decode_rate);
  if (const json* ol = find(v, "output_len")) {
    p.output_len = parse_output_len(*ol, path + ".output_len");
  }
  p.conf_logprob_mu = get_double(v, path, "conf_logprob_mu", p.conf_logprob_mu);
  p.conf_logprob_sigma = get_double(v, path, "conf_logprob_sigma", p.conf_logprob_sigma);
  p.semantic_overlap = get_double(v, path, "semantic_overlap", p.semantic_overlap);
  p.validate(path);
  return p;
}

json profile_to_json(const AgentProfile& p) {
  json j;
  j["prefill_rate"] = p.prefill_rate;
  j["decode_rate"] = p.decode_rate;
  j["output_len"] = output_len_to_json(p.output_len);
  j["conf_logprob_mu"] = p.conf_logprob_mu;
  j["conf_logprob_sigma"] = p.conf_logprob_sigma;
  j["semantic_overlap"] = p.semantic_overlap;
  return j;
}

ProviderSpec parse_provider(const json& v, const std::string& path, const ProviderSpec& base) {
  if (!v.is_object()) bad(path, "expected an object");
  check_keys(v, path,
             {"kind", "hidden", "seed", "path", "endpoint", "model", "api_key_env",
              "max_in_flight", "timeout_s", "memoize"});
  ProviderSpec p = base;
  if (const json* k = find(v, "kind")) {
    if (!k->is_string()) bad(path + ".kind", "expected a string");
    p.kind = provider_kind_from_string(k->get<std::string>());
  }
  p.hidden = get_int(v, path, "hidden", p.hidden);
  p.seed = get_u64(v, path, "seed", p.seed);
  p.path = get_string(v, path, "path", p.path);
  p.endpoint = get_string(v, path, "endpoint", p.endpoint);
  p.model = get_string(v, path, "model", p.model);
  p.api_key_env = get_string(v, path, "api_key_env", p.api_key_env);
  p.max_in_flight = get_int(v, path, "max_in_flight", p.max_in_flight);
  p.timeout_s = get_int(v, path, "timeout_s", p.timeout_s);
  p.memoize = get_bool(v, path, "memoize", p.memoize);
  return p;
}

json provider_to_json(const ProviderSpec& p) {
  json j;
  j["kind"] = to_string(p.kind);
  j["hidden"] = p.hidden;
  j["seed"] = p.seed;
  if (!p.path.empty()) j["path"] = p.path;
  if (!p.endpoint.empty()) {
    j["endpoint"] = p.endpoint;
    j["model"] = p.model;
    j["api_key_env"] = p.api_key_env;
    j["max_in_flight"] = p.max_in_flight;
    j["timeout_s"] = p.timeout_s;
  }
  j["memoize"] = p.memoize;
  return j;
}

}  // namespace

AppConfig AppConfig::preset() {
  AppConfig c;
  c.widths = {9, 3, 1};
  c.branching = {3, 3};
  c.all_to_all_widths = {9, 9, 1};

  // Proposer profiles: shared output-length law, decode rate falling with
  // model size so the slow profile dominates each cluster's tail.
  AgentProfile fast;
  fast.prefill_rate = 12000.0;
  fast.decode_rate = 160.0;
  fast.output_len = OutputLenDist::uniform(256, 1024);
  fast.conf_logprob_mu = -1.0;
  fast.conf_logprob_sigma = 0.15;
  fast.semantic_overlap = 0.85;

  AgentProfile medium = fast;
  medium.prefill_rate = 8000.0;
  medium.decode_rate = 80.0;

  AgentProfile slow = fast;
  slow.prefill_rate = 3000.0;
  slow.decode_rate = 35.0;

  // Aggregators: prefill-bound (long fused prompts over a modest prefill
  // rate) with short fixed outputs.
  AgentProfile agg = fast;
  agg.prefill_rate = 500.0;
  agg.decode_rate = 90.0;
  agg.output_len = OutputLenDist::fixed_len(256);

  c.profiles["4B"] = fast;
  c.profiles["8B"] = medium;
  c.profiles["32B"] = slow;
  c.profiles["agg-mid"] = agg;
  c.profiles["agg-root"] = agg;
  for (auto& [name, p] : c.profiles) p.model_tag = name;

  c.layer_assignment = {{"4B", "8B", "32B"}, {"agg-mid"}, {"agg-root"}};

  c.run.mode = ScheduleMode::IncrementalOverlap;
  c.run.early_exit = true;
  c.run.exit_scope = ExitScope::Cluster;
  c.run.tau = kDefaultTau;
  c.run.include_diagonal = true;
  c.run.ee_eval_latency = 0.25;
  c.run.chunk_size = 32;
  c.run.seed = 0;
  c.run.repetitions = 24;
  c.run.query_tokens = 256;
  c.run.leaf_prefix_tokens = 64;
  c.run.agg_prefix_tokens = 96;
  c.run.separator_tokens = 0;
  c.run.suffix_tokens = 32;
  c.run.prefill_startup_overhead = 0.0;
  c.run.kv_transfer_per_block = 0.004;
  c.run.kv_block_tokens = 16;

  c.run.provider.kind = ProviderSpec::Kind::DeterministicMock;
  c.run.provider.hidden = 64;
  c.run.provider.seed = 0;
  c.run.provider.memoize = true;

  c.ablation_samples = 24;
  c.second_layer = SecondLayerConfig{};

  c.finalize();
  return c;
}

const std::string& AppConfig::profile_name_for(int layer, int position) const {
  auto key = std::to_string(layer) + ":" + std::to_string(position);
  if (auto it = overrides.find(key); it != overrides.end()) return it->second;
  if (layer_assignment.empty()) {
    throw ValidationError("config: assignment.layers: must not be empty");
  }
  std::size_t li = std::min(static_cast<std::size_t>(layer - 1), layer_assignment.size() - 1);
  const auto& cycle = layer_assignment[li];
  if (cycle.empty()) {
    throw ValidationError("config: assignment.layers[" + std::to_string(li) +
                          "]: must not be empty");
  }
  return cycle[static_cast<std::size_t>(position) % cycle.size()];
}

namespace {

void assign_over(Topology& topo, const AppConfig& cfg) {
  for (const auto& layer : topo.layers()) {
    for (const auto& a : layer) {
      const std::string& name = cfg.profile_name_for(a.layer, a.position);
      auto it = cfg.profiles.find(name);
      if (it == cfg.profiles.end()) {
        throw ValidationError("config: assignment references unknown profile '" + name +
                              "' for agent " + a.str());
      }
      topo.assign_profile(a, it->second);
    }
  }
}

}  // namespace

Topology AppConfig::tree_topology() const {
  Topology t = cluster_sizes.empty() ? Topology::tree(widths, branching)
                                     : Topology::tree_custom(widths, cluster_sizes);
  assign_over(t, *this);
  return t;
}

Topology AppConfig::all_to_all_topology() const {
  Topology t = Topology::all_to_all(all_to_all_widths);
  assign_over(t, *this);
  return t;
}

void AppConfig::finalize() {
  if (profiles.empty()) throw ValidationError("config: profiles: must not be empty");
  run.topology = tree_topology();
  run.validate();
  if (ablation_samples <= 0) throw ValidationError("config: ablation.samples: must be > 0");
  if (all_to_all_widths.empty() || all_to_all_widths.back() != 1) {
    throw ValidationError("config: ablation.all_to_all_widths: must end in a single aggregator");
  }
  all_to_all_topology();  // surfaces assignment errors against the baseline shape
  second_layer.validate();
}

AppConfig AppConfig::from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ValidationError("config: top level must be a JSON object");
  check_keys(j, "config",
             {"topology", "profiles", "assignment", "run", "provider", "ablation",
              "second_layer"});
  AppConfig c = preset();

  if (const json* t = find(j, "topology")) {
    if (!t->is_object()) bad("topology", "expected an object");
    check_keys(*t, "topology", {"widths", "branching", "cluster_sizes"});
    if (const json* w = find(*t, "widths")) c.widths = get_int_list(*w, "topology.widths");
    if (const json* b = find(*t, "branching")) {
      c.branching = get_int_list(*b, "topology.branching");
      c.cluster_sizes.clear();
    }
    if (const json* cs = find(*t, "cluster_sizes")) {
      if (!cs->is_array()) bad("topology.cluster_sizes", "expected an array of arrays");
      c.cluster_sizes.clear();
      for (std::size_t i = 0; i < cs->size(); ++i) {
        c.cluster_sizes.push_back(get_int_list(
            (*cs)[i], "topology.cluster_sizes[" + std::to_string(i) + "]"));
      }
    }
  }

  if (const json* ps = find(j, "profiles")) {
    if (!ps->is_object()) bad("profiles", "expected an object");
    c.profiles.clear();
    for (const auto& [name, v] : ps->items()) {
      c.profiles[name] = parse_profile(v, name, "profiles." + name, AgentProfile{});
    }
  }

  if (const json* asg = find(j, "assignment")) {
    if (!asg->is_object()) bad("assignment", "expected an object");
    check_keys(*asg, "assignment", {"layers", "overrides"});
    if (const json* layers = find(*asg, "layers")) {
      if (!layers->is_array()) bad("assignment.layers", "expected an array of arrays");
      c.layer_assignment.clear();
      for (std::size_t i = 0; i < layers->size(); ++i) {
        const json& row = (*layers)[i];
        std::string path = "assignment.layers[" + std::to_string(i) + "]";
        if (!row.is_array()) bad(path, "expected an array of profile names");
        std::vector<std::string> names;
        for (const auto& n : row) {
          if (!n.is_string()) bad(path, "expected an array of profile names");
          names.push_back(n.get<std::string>());
        }
        c.layer_assignment.push_back(std::move(names));
      }
    }
    if (const json* ov = find(*asg, "overrides")) {
      if (!ov->is_object()) bad("assignment.overrides", "expected an object");
      c.overrides.clear();
      for (const auto& [key, v] : ov->items()) {
        AgentId::parse(key);  // rejects malformed agent addresses
        if (!v.is_string()) bad("assignment.overrides." + key, "expected a profile name");
        c.overrides[key] = v.get<std::string>();
      }
    }
  }

  if (const json* r = find(j, "run")) {
    if (!r->is_object()) bad("run", "expected an object");
    check_keys(*r, "run",
               {"mode", "early_exit", "exit_scope", "tau", "include_diagonal",
                "ee_eval_latency", "force_q", "chunk_size", "seed", "repetitions",
                "query_tokens", "leaf_prefix_tokens", "agg_prefix_tokens", "separator_tokens",
                "suffix_tokens", "prefill_startup_overhead", "kv_transfer_per_block",
                "kv_block_tokens"});
    if (const json* m = find(*r, "mode")) {
      if (!m->is_string()) bad("run.mode", "expected a string");
      c.run.mode = schedule_mode_from_string(m->get<std::string>());
    }
    c.run.early_exit = get_bool(*r, "run", "early_exit", c.run.early_exit);
    if (const json* es = find(*r, "exit_scope")) {
      if (!es->is_string()) bad("run.exit_scope", "expected a string");
      c.run.exit_scope = exit_scope_from_string(es->get<std::string>());
    }
    c.run.tau = get_double(*r, "run", "tau", c.run.tau);
    c.run.include_diagonal = get_bool(*r, "run", "include_diagonal", c.run.include_diagonal);
    c.run.ee_eval_latency = get_double(*r, "run", "ee_eval_latency", c.run.ee_eval_latency);
    if (const json* fq = find(*r, "force_q")) {
      if (fq->is_null()) {
        c.run.force_q.reset();
      } else if (fq->is_number()) {
        c.run.force_q = fq->get<double>();
      } else {
        bad("run.force_q", "expected a number or null");
      }
    }
    c.run.chunk_size = get_int(*r, "run", "chunk_size", c.run.chunk_size);
    c.run.seed = get_u64(*r, "run", "seed", c.run.seed);
    c.run.repetitions = get_int(*r, "run", "repetitions", c.run.repetitions);
    c.run.query_tokens = get_int(*r, "run", "query_tokens", c.run.query_tokens);
    c.run.leaf_prefix_tokens = get_int(*r, "run", "leaf_prefix_tokens", c.run.leaf_prefix_tokens);
    c.run.agg_prefix_tokens = get_int(*r, "run", "agg_prefix_tokens", c.run.agg_prefix_tokens);
    c.run.separator_tokens = get_int(*r, "run", "separator_tokens", c.run.separator_tokens);
    c.run.suffix_tokens = get_int(*r, "run", "suffix_tokens", c.run.suffix_tokens);
    c.run.prefill_startup_overhead =
        get_double(*r, "run", "prefill_startup_overhead", c.run.prefill_startup_overhead);
    c.run.kv_transfer_per_block =
        get_double(*r, "run", "kv_transfer_per_block", c.run.kv_transfer_per_block);
    c.run.kv_block_tokens = get_int(*r, "run", "kv_block_tokens", c.run.kv_block_tokens);
  }

  if (const json* p = find(j, "provider")) {
    c.run.provider = parse_provider(*p, "provider", c.run.provider);
  }

  if (const json* ab = find(j, "ablation")) {
    if (!ab->is_object()) bad("ablation", "expected an object");
    check_keys(*ab, "ablation", {"samples", "all_to_all_widths"});
    c.ablation_samples = get_int(*ab, "ablation", "samples", c.ablation_samples);
    if (const json* w = find(*ab, "all_to_all_widths")) {
      c.all_to_all_widths = get_int_list(*w, "ablation.all_to_all_widths");
    }
  }

  if (const json* sl = find(j, "second_layer")) {
    if (!sl->is_object()) bad("second_layer", "expected an object");
    check_keys(*sl, "second_layer",
               {"samples", "seed", "precursors", "out_min", "out_max", "precursor_decode_rate",
                "precursor_prefill_rate", "precursor_prompt_tokens", "agg_prefill_rate",
                "agg_decode_rate", "agg_prefix_tokens", "agg_suffix_tokens", "agg_output_tokens",
                "chunk_size", "kv_transfer_per_block", "kv_block_tokens",
                "prefill_startup_overhead"});
    SecondLayerConfig& s = c.second_layer;
    s.samples = get_int(*sl, "second_layer", "samples", s.samples);
    s.seed = get_u64(*sl, "second_layer", "seed", s.seed);
    s.precursors = get_int(*sl, "second_layer", "precursors", s.precursors);
    s.out_min = get_int(*sl, "second_layer", "out_min", s.out_min);
    s.out_max = get_int(*sl, "second_layer", "out_max", s.out_max);
    s.precursor_decode_rate =
        get_double(*sl, "second_layer", "precursor_decode_rate", s.precursor_decode_rate);
    s.precursor_prefill_rate =
        get_double(*sl, "second_layer", "precursor_prefill_rate", s.precursor_prefill_rate);
    s.precursor_prompt_tokens =
        get_int(*sl, "second_layer", "precursor_prompt_tokens", s.precursor_prompt_tokens);
    s.agg_prefill_rate = get_double(*sl, "second_layer", "agg_prefill_rate", s.agg_prefill_rate);
    s.agg_decode_rate = get_double(*sl, "second_layer", "agg_decode_rate", s.agg_decode_rate);
    s.agg_prefix_tokens = get_int(*sl, "second_layer", "agg_prefix_tokens", s.agg_prefix_tokens);
    s.agg_suffix_tokens = get_int(*sl, "second_layer", "agg_suffix_tokens", s.agg_suffix_tokens);
    s.agg_output_tokens = get_int(*sl, "second_layer", "agg_output_tokens", s.agg_output_tokens);
    s.chunk_size = get_int(*sl, "second_layer", "chunk_size", s.chunk_size);
    s.kv_transfer_per_block =
        get_double(*sl, "second_layer", "kv_transfer_per_block", s.kv_transfer_per_block);
    s.kv_block_tokens = get_int(*sl, "second_layer", "kv_block_tokens", s.kv_block_tokens);
    s.prefill_startup_overhead =
        get_double(*sl, "second_layer", "prefill_startup_overhead", s.prefill_startup_overhead);
  }

  c.finalize();
  return c;
}

AppConfig AppConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ValidationError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::ordered_json AppConfig::to_json() const {
  json j;
  json topo;
  topo["widths"] = widths;
  if (cluster_sizes.empty()) {
    topo["branching"] = branching;
  } else {
    topo["cluster_sizes"] = cluster_sizes;
  }
  j["topology"] = std::move(topo);

  json ps = json::object();
  for (const auto& [name, p] : profiles) ps[name] = profile_to_json(p);
  j["profiles"] = std::move(ps);

  json asg;
  asg["layers"] = layer_assignment;
  if (!overrides.empty()) {
    json ov = json::object();
    for (const auto& [k, v] : overrides) ov[k] = v;
    asg["overrides"] = std::move(ov);
  }
  j["assignment"] = std::move(asg);

  json r;
  r["mode"] = to_string(run.mode);
  r["early_exit"] = run.early_exit;
  r["exit_scope"] = to_string(run.exit_scope);
  r["tau"] = run.tau;
  r["include_diagonal"] = run.include_diagonal;
  r["ee_eval_latency"] = run.ee_eval_latency;
  if (run.force_q) r["force_q"] = *run.force_q;
  r["chunk_size"] = run.chunk_size;
  r["seed"] = run.seed;
  r["repetitions"] = run.repetitions;
  r["query_tokens"] = run.query_tokens;
  r["leaf_prefix_tokens"] = run.leaf_prefix_tokens;
  r["agg_prefix_tokens"] = run.agg_prefix_tokens;
  r["separator_tokens"] = run.separator_tokens;
  r["suffix_tokens"] = run.suffix_tokens;
  r["prefill_startup_overhead"] = run.prefill_startup_overhead;
  r["kv_transfer_per_block"] = run.kv_transfer_per_block;
  r["kv_block_tokens"] = run.kv_block_tokens;
  j["run"] = std::move(r);

  j["provider"] = provider_to_json(run.provider);

  json ab;
  ab["samples"] = ablation_samples;
  ab["all_to_all_widths"] = all_to_all_widths;
  j["ablation"] = std::move(ab);

  json sl;
  sl["samples"] = second_layer.samples;
  sl["seed"] = second_layer.seed;
  sl["precursors"] = second_layer.precursors;
  sl["out_min"] = second_layer.out_min;
  sl["out_max"] = second_layer.out_max;
  sl["precursor_decode_rate"] = second_layer.precursor_decode_rate;
  sl["precursor_prefill_rate"] = second_layer.precursor_prefill_rate;
  sl["precursor_prompt_tokens"] = second_layer.precursor_prompt_tokens;
  sl["agg_prefill_rate"] = second_layer.agg_prefill_rate;
  sl["agg_decode_rate"] = second_layer.agg_decode_rate;
  sl["agg_prefix_tokens"] = second_layer.agg_prefix_tokens;
  sl["agg_suffix_tokens"] = second_layer.agg_suffix_tokens;
  sl["agg_output_tokens"] = second_layer.agg_output_tokens;
  sl["chunk_size"] = second_layer.chunk_size;
  sl["kv_transfer_per_block"] = second_layer.kv_transfer_per_block;
  sl["kv_block_tokens"] = second_layer.kv_block_tokens;
  sl["prefill_startup_overhead"] = second_layer.prefill_startup_overhead;
  j["second_layer"] = std::move(sl);

  return j;
}

}  // namespace moaserve
