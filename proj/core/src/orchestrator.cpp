#include "moaserve/orchestrator.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <sstream>

#include "moaserve/errors.hpp"

namespace moaserve {

std::string to_string(ExitScope s) { return s == ExitScope::Cluster ? "cluster" : "layer"; }

ExitScope exit_scope_from_string(const std::string& s) {
  if (s == "cluster") return ExitScope::Cluster;
  if (s == "layer") return ExitScope::Layer;
  throw ValidationError("exit_scope: expected 'cluster' or 'layer', got '" + s + "'");
}

void RunConfig::validate() const {
  if (topology.layers().back().size() != 1) {
    throw ValidationError("run: last layer must hold a single aggregator");
  }
  if (!(tau > 0.0 && tau <= 1.0)) throw ValidationError("run.tau: must be in (0, 1]");
  if (chunk_size <= 0) throw ValidationError("run.chunk_size: must be > 0");
  if (repetitions <= 0) throw ValidationError("run.repetitions: must be > 0");
  if (ee_eval_latency < 0) throw ValidationError("run.ee_eval_latency: must be >= 0");
  if (force_q && !(*force_q >= 0.0 && *force_q <= 1.0)) {
    throw ValidationError("run.force_q: must be in [0, 1]");
  }
  if (query_tokens < 0 || leaf_prefix_tokens < 0 || agg_prefix_tokens < 0 ||
      separator_tokens < 0 || suffix_tokens < 0) {
    throw ValidationError("run: token counts must be >= 0");
  }
  if (prefill_startup_overhead < 0) {
    throw ValidationError("run.prefill_startup_overhead: must be >= 0");
  }
  if (kv_transfer_per_block < 0) throw ValidationError("run.kv_transfer_per_block: must be >= 0");
  if (kv_block_tokens <= 0) throw ValidationError("run.kv_block_tokens: must be > 0");
  provider.validate();
  if (early_exit) {
    // Quality scores need at least one token of logprobs per output.
    for (const auto& layer : topology.layers()) {
      for (const auto& a : layer) {
        const auto& d = topology.profile(a).output_len;
        bool ok = true;
        switch (d.kind) {
          case OutputLenDist::Kind::Fixed: ok = d.fixed >= 1; break;
          case OutputLenDist::Kind::Uniform: ok = d.lo >= 1; break;
          case OutputLenDist::Kind::Empirical:
            ok = !d.values.empty() &&
                 *std::min_element(d.values.begin(), d.values.end()) >= 1;
            break;
        }
        if (!ok) {
          throw ValidationError("run: early exit needs output_len >= 1 for agent " + a.str());
        }
      }
    }
  }
}

std::string RunConfig::mode_label() const {
  std::string label = to_string(topology.kind()) + "|" + to_string(mode);
  if (early_exit) label += "|ee";
  return label;
}

namespace {

EngineSpec engine_for(const RunConfig& cfg, const AgentProfile& p) {
  EngineSpec s = EngineSpec::from_profile(p);
  s.prefill_startup_overhead = cfg.prefill_startup_overhead;
  s.kv_transfer_per_block = cfg.kv_transfer_per_block;
  s.kv_block_tokens = cfg.kv_block_tokens;
  return s;
}

// Cluster-shared output pools: agents of a cluster draw a semantic_overlap
// fraction of tokens from the pool so sibling outputs genuinely correlate.
struct PoolKey {
  int layer;
  int group;
};

TokenSeq make_output(std::uint64_t ss, const AgentId& a, const AgentProfile& prof, int len,
                     std::optional<PoolKey> pool) {
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(len));
  std::string own = "own:" + a.str();
  std::string mix = "mix:" + a.str();
  std::string pool_label;
  if (pool) {
    pool_label = "pool:" + std::to_string(pool->layer) + ":" + std::to_string(pool->group);
  }
  for (int k = 0; k < len; ++k) {
    bool shared = pool && hash_unit(ss, mix, static_cast<std::uint64_t>(k)) < prof.semantic_overlap;
    const std::string& label = shared ? pool_label : own;
    out.push_back(static_cast<Token>(hash_u64(ss, label, static_cast<std::uint64_t>(k)) % 50000));
  }
  return out;
}

TokenLogProbs make_logprobs(std::uint64_t ss, const AgentId& a, const AgentProfile& prof,
                            int len) {
  TokenLogProbs lp;
  lp.values.reserve(static_cast<std::size_t>(len));
  std::string label = "lp:" + a.str();
  for (int k = 0; k < len; ++k) {
    double v = hash_gaussian(ss, label, static_cast<std::uint64_t>(k), prof.conf_logprob_mu,
                             prof.conf_logprob_sigma);
    lp.values.push_back(std::min(0.0, v));
  }
  return lp;
}

// One exit group: the completions it scores and its own RNG stream.
struct ExitGroup {
  std::string label;
  std::vector<AgentId> members;
  std::unique_ptr<MetricQEvaluator> evaluator;
  RngStream rng{0};
  bool exited = false;
  int evals = 0;
};

}  // namespace

RunTrace run_query(const RunConfig& cfg, int sample_index) {
  cfg.validate();
  const Topology& topo = cfg.topology;
  std::uint64_t ss = hash_combine(cfg.seed, static_cast<std::uint64_t>(sample_index));

  SimWorld world;
  SimDriver driver(world, cfg.mode, cfg.chunk_size);

  // Group index per agent for shared output pools (successor clusters).
  std::map<AgentId, PoolKey> pool_of;
  for (int l = 2; l <= topo.depth(); ++l) {
    auto clusters = topo.clusters_of_layer(l);
    for (std::size_t j = 0; j < clusters.size(); ++j) {
      for (const auto& m : clusters[j]) {
        // All-to-all: every successor shares the full previous layer; the
        // first successor's grouping wins (identical membership anyway).
        pool_of.emplace(m, PoolKey{l - 1, static_cast<int>(j)});
      }
    }
  }

  TokenSeq query = synth_tokens(ss, "query", cfg.query_tokens);

  std::map<AgentId, TokenSeq> outputs;
  std::map<AgentId, TokenLogProbs> logprobs;
  for (const auto& layer : topo.layers()) {
    for (const auto& a : layer) {
      const AgentProfile& prof = topo.profile(a);
      RngStream lr = RngStream::derive(ss, "outlen:" + a.str());
      int len = prof.output_len.sample(lr);
      std::optional<PoolKey> pool;
      if (auto it = pool_of.find(a); it != pool_of.end()) pool = it->second;
      outputs[a] = make_output(ss, a, prof, len, pool);
      logprobs[a] = make_logprobs(ss, a, prof, len);
    }
  }

  for (const auto& layer : topo.layers()) {
    for (const auto& a : layer) {
      const AgentProfile& prof = topo.profile(a);
      EngineSpec spec = engine_for(cfg, prof);
      if (topo.precursors(a).empty()) {
        TokenSeq prompt = synth_tokens(ss, "leaf_prefix:" + a.str(), cfg.leaf_prefix_tokens);
        prompt.insert(prompt.end(), query.begin(), query.end());
        driver.add_source(a, spec, prof.model_tag, std::move(prompt), outputs[a]);
      } else {
        std::vector<SlotSpec> slots;
        const auto& pre = topo.precursors(a);
        for (std::size_t k = 0; k < pre.size(); ++k) {
          SlotSpec slot;
          slot.precursor = pre[k];
          slot.separator =
              synth_tokens(ss, "sep:" + a.str() + ":" + std::to_string(k), cfg.separator_tokens);
          slots.push_back(std::move(slot));
        }
        PromptTemplate tmpl(synth_tokens(ss, "agg_prefix:" + a.str(), cfg.agg_prefix_tokens),
                            std::move(slots),
                            synth_tokens(ss, "suffix:" + a.str(), cfg.suffix_tokens));
        driver.add_plan(a, spec, prof.model_tag, std::move(tmpl), outputs[a]);
      }
    }
  }

  // Early-exit wiring: one evaluator per exit group, fed in completion order.
  std::vector<std::unique_ptr<ExitGroup>> groups;
  std::map<AgentId, ExitGroup*> group_of;
  std::unique_ptr<EmbeddingProvider> provider;
  RunTrace* trace_sink = &world.trace();
  if (cfg.early_exit && topo.depth() > 1) {
    provider = make_provider(cfg.provider);
    MetricQOptions opts;
    opts.tau = cfg.tau;
    opts.include_diagonal = cfg.include_diagonal;

    std::vector<std::vector<AgentId>> member_sets;
    if (cfg.exit_scope == ExitScope::Layer || topo.kind() == TopologyKind::AllToAll) {
      for (int l = 1; l < topo.depth(); ++l) member_sets.push_back(topo.layer(l));
    } else {
      for (int l = 2; l <= topo.depth(); ++l) {
        for (auto& cluster : topo.clusters_of_layer(l)) member_sets.push_back(cluster);
      }
    }
    for (std::size_t g = 0; g < member_sets.size(); ++g) {
      auto grp = std::make_unique<ExitGroup>();
      grp->label = "ee:" + std::to_string(g);
      grp->members = member_sets[g];
      grp->evaluator = std::make_unique<MetricQEvaluator>(*provider, opts);
      grp->rng = RngStream::derive(ss, grp->label);
      for (const auto& m : grp->members) group_of[m] = grp.get();
      groups.push_back(std::move(grp));
    }

    driver.set_completion_gate([&, trace_sink](const AgentId& producer, double t) {
      auto it = group_of.find(producer);
      if (it == group_of.end()) {
        driver.release(producer);
        return;
      }
      ExitGroup* grp = it->second;
      if (grp->exited) {
        // Group already exited; this agent finished before the verdict
        // landed, so it survives and propagates immediately.
        driver.release(producer);
        return;
      }
      world.schedule(t + cfg.ee_eval_latency, [&, trace_sink, producer, grp]() {
        RunTrace& tr = *trace_sink;
        MetricQRecord rec;
        rec.t = world.now();
        rec.group = grp->label;
        rec.eval_index = grp->evals;
        rec.completed = producer;
        if (grp->exited) {
          rec.evaluated = false;
          rec.decision = ExitDecision{};
          tr.metricq.push_back(std::move(rec));
          driver.release(producer);
          return;
        }
        grp->evals += 1;
        tr.ee_evals += 1;
        tr.ee_latency_total += cfg.ee_eval_latency;
        rec.evaluated = true;
        rec.score = grp->evaluator->add_completion(outputs.at(producer), logprobs.at(producer));
        double q = cfg.force_q ? *cfg.force_q : rec.score.q;
        rec.decision = decide_exit(q, grp->rng);
        if (rec.decision.exited) {
          grp->exited = true;
          for (const auto& m : grp->members) {
            if (m == producer || world.finished(m) || world.cancelled(m)) continue;
            rec.pruned.push_back(m);
          }
        }
        nlohmann::ordered_json pruned_names = nlohmann::ordered_json::array();
        for (const auto& m : rec.pruned) pruned_names.push_back(m.str());
        tr.add_event(world.now(), "ee_eval", producer.str(),
                     {{"group", grp->label},
                      {"eval_index", rec.eval_index},
                      {"q", rec.decision.q},
                      {"draw", rec.decision.draw},
                      {"exited", rec.decision.exited},
                      {"pruned", std::move(pruned_names)}});
        for (const auto& m : rec.pruned) driver.prune(m);
        tr.metricq.push_back(std::move(rec));
        driver.release(producer);
      });
    });
  }

  driver.start();
  world.run();

  RunTrace trace;
  trace.mode_label = cfg.mode_label();
  trace.seed = cfg.seed;
  trace.sample_index = sample_index;
  trace.metricq = world.trace().metricq;
  trace.ee_evals = world.trace().ee_evals;
  trace.ee_latency_total = world.trace().ee_latency_total;
  world.finalize_into(trace);
  double e2e = 0.0;
  for (const auto& [id, rec] : trace.agents) e2e = std::max(e2e, rec.complete_t);
  trace.e2e_latency = e2e;
  trace.roll_up();
  return trace;
}

std::vector<RunTrace> run_repetitions(const RunConfig& cfg) {
  std::vector<RunTrace> traces;
  traces.reserve(static_cast<std::size_t>(cfg.repetitions));
  for (int i = 0; i < cfg.repetitions; ++i) traces.push_back(run_query(cfg, i));
  return traces;
}

namespace {

double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  double rank = p * static_cast<double>(v.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  std::size_t hi = static_cast<std::size_t>(std::ceil(rank));
  double frac = rank - std::floor(rank);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double critical_path_prefill_share(const Topology& topo, const RunTrace& trace) {
  // Walk back from the root through the latest-completing surviving
  // precursor; sum committed prefill seconds along that chain.
  double prefill = 0.0;
  AgentId at = topo.root();
  while (true) {
    const AgentRecord& rec = trace.agents.at(at);
    for (const auto& p : rec.prefill) {
      if (!p.wasted) prefill += p.end - p.start;
    }
    const auto& pre = topo.precursors(at);
    const AgentId* next = nullptr;
    double best = -1.0;
    for (const auto& p : pre) {
      auto it = trace.agents.find(p);
      if (it == trace.agents.end() || it->second.pruned) continue;
      if (it->second.complete_t > best) {
        best = it->second.complete_t;
        next = &p;
      }
    }
    if (!next) break;
    at = *next;
  }
  return trace.e2e_latency > 0 ? prefill / trace.e2e_latency : 0.0;
}

RunSummary summarize(const RunConfig& cfg, const std::vector<RunTrace>& traces) {
  RunSummary s;
  s.mode_label = cfg.mode_label();
  s.samples = static_cast<int>(traces.size());
  std::vector<double> e2e, ee_share, calls, recomputed, share;
  for (const auto& t : traces) {
    e2e.push_back(t.e2e_latency);
    ee_share.push_back(t.ee_latency_share);
    calls.push_back(static_cast<double>(t.prefill_only_calls_total));
    recomputed.push_back(static_cast<double>(t.recomputed_tokens_total));
    share.push_back(critical_path_prefill_share(cfg.topology, t));
    for (const auto& [tag, a] : t.activation) {
      auto& acc = s.activation_counts[tag];
      acc.instances += a.instances;
      acc.invoked += a.invoked;
      acc.pruned += a.pruned;
    }
  }
  s.mean_e2e = mean(e2e);
  s.p50_e2e = percentile(e2e, 0.50);
  s.p95_e2e = percentile(e2e, 0.95);
  s.mean_ee_share = mean(ee_share);
  s.mean_prefill_only_calls = mean(calls);
  s.mean_recomputed_tokens = mean(recomputed);
  s.prefill_share = mean(share);
  for (const auto& [tag, a] : s.activation_counts) {
    s.activation[tag] =
        a.instances > 0 ? static_cast<double>(a.invoked) / static_cast<double>(a.instances) : 0.0;
  }
  return s;
}

nlohmann::ordered_json RunSummary::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = mode_label;
  j["samples"] = samples;
  j["mean_e2e"] = mean_e2e;
  j["p50_e2e"] = p50_e2e;
  j["p95_e2e"] = p95_e2e;
  j["mean_ee_latency_share"] = mean_ee_share;
  j["mean_prefill_only_calls"] = mean_prefill_only_calls;
  j["mean_recomputed_tokens"] = mean_recomputed_tokens;
  j["critical_path_prefill_share"] = prefill_share;
  nlohmann::ordered_json act = nlohmann::ordered_json::object();
  for (const auto& [tag, a] : activation_counts) {
    act[tag] = {{"instances", a.instances},
                {"invoked", a.invoked},
                {"pruned", a.pruned},
                {"activation", activation.at(tag)}};
  }
  j["activation"] = std::move(act);
  j["accuracy"] = "excluded: requires real model inference";
  return j;
}

std::string AblationTable::to_csv() const {
  std::set<std::string> tags;
  for (const auto& r : rows) {
    for (const auto& [tag, v] : r.activation) tags.insert(tag);
  }
  std::ostringstream out;
  out << "setting,samples,mean_e2e_s,p50_e2e_s,p95_e2e_s,normalized_mean,ee_latency_share";
  for (const auto& tag : tags) out << ",activation_" << tag;
  out << ",accuracy\n";
  for (const auto& r : rows) {
    out << r.setting << ',' << r.samples << ',' << format_double(r.mean_e2e) << ','
        << format_double(r.p50_e2e) << ',' << format_double(r.p95_e2e) << ','
        << format_double(r.normalized_mean) << ',' << format_double(r.mean_ee_share);
    for (const auto& tag : tags) {
      auto it = r.activation.find(tag);
      out << ',' << format_double(it == r.activation.end() ? 0.0 : it->second);
    }
    out << ',' << r.accuracy << "\n";
  }
  return out.str();
}

nlohmann::ordered_json AblationTable::to_json() const {
  nlohmann::ordered_json rows_json = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["setting"] = r.setting;
    j["samples"] = r.samples;
    j["mean_e2e_s"] = r.mean_e2e;
    j["p50_e2e_s"] = r.p50_e2e;
    j["p95_e2e_s"] = r.p95_e2e;
    j["normalized_mean"] = r.normalized_mean;
    j["ee_latency_share"] = r.mean_ee_share;
    nlohmann::ordered_json act = nlohmann::ordered_json::object();
    for (const auto& [tag, v] : r.activation) act[tag] = v;
    j["activation"] = std::move(act);
    j["accuracy"] = r.accuracy;
    rows_json.push_back(std::move(j));
  }
  nlohmann::ordered_json j;
  j["rows"] = std::move(rows_json);
  return j;
}

AblationTable run_ablation(const RunConfig& tree_base, const Topology& all_to_all, int samples) {
  if (samples <= 0) throw ValidationError("ablation: samples must be > 0");
  if (tree_base.topology.kind() != TopologyKind::Tree) {
    throw ValidationError("ablation: base config must use a tree topology");
  }
  if (all_to_all.kind() != TopologyKind::AllToAll) {
    throw ValidationError("ablation: baseline topology must be all-to-all");
  }

  struct Setting {
    std::string name;
    RunConfig cfg;
  };
  std::vector<Setting> settings;

  RunConfig ata = tree_base;
  ata.topology = all_to_all;
  ata.mode = ScheduleMode::SequentialPd;
  ata.early_exit = false;
  settings.push_back({"all-to-all", std::move(ata)});

  RunConfig tree_only = tree_base;
  tree_only.mode = ScheduleMode::SequentialPd;
  tree_only.early_exit = false;
  settings.push_back({"tree", std::move(tree_only)});

  RunConfig tree_overlap = tree_base;
  tree_overlap.mode = ScheduleMode::IncrementalOverlap;
  tree_overlap.early_exit = false;
  settings.push_back({"tree+overlap", std::move(tree_overlap)});

  RunConfig full = tree_base;
  full.mode = ScheduleMode::IncrementalOverlap;
  full.early_exit = true;
  settings.push_back({"tree+overlap+ee", std::move(full)});

  std::vector<std::vector<double>> e2e(settings.size());
  AblationTable table;
  for (std::size_t i = 0; i < settings.size(); ++i) {
    settings[i].cfg.repetitions = samples;
    auto traces = run_repetitions(settings[i].cfg);
    RunSummary s = summarize(settings[i].cfg, traces);
    for (const auto& t : traces) e2e[i].push_back(t.e2e_latency);

    AblationRow row;
    row.setting = settings[i].name;
    row.samples = samples;
    row.mean_e2e = s.mean_e2e;
    row.p50_e2e = s.p50_e2e;
    row.p95_e2e = s.p95_e2e;
    row.mean_ee_share = s.mean_ee_share;
    row.activation = s.activation;
    table.rows.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < settings.size(); ++i) {
    std::vector<double> ratios;
    for (int k = 0; k < samples; ++k) {
      double base = e2e[0][static_cast<std::size_t>(k)];
      ratios.push_back(base > 0 ? e2e[i][static_cast<std::size_t>(k)] / base : 0.0);
    }
    table.rows[i].normalized_mean = mean(ratios);
  }
  return table;
}

void SecondLayerConfig::validate() const {
  if (samples <= 0) throw ValidationError("second_layer.samples: must be > 0");
  if (precursors <= 0) throw ValidationError("second_layer.precursors: must be > 0");
  if (out_min < 1 || out_max < out_min) {
    throw ValidationError("second_layer: need 1 <= out_min <= out_max");
  }
  if (chunk_size <= 0) throw ValidationError("second_layer.chunk_size: must be > 0");
}

std::vector<SecondLayerRow> run_second_layer_study(const SecondLayerConfig& cfg) {
  cfg.validate();
  const ScheduleMode modes[] = {ScheduleMode::SequentialPd, ScheduleMode::DpOnly,
                                ScheduleMode::DpChunkedPrefill, ScheduleMode::IncrementalOverlap};
  std::vector<SecondLayerRow> rows;
  std::vector<std::vector<double>> e2e(4);

  for (int sample = 0; sample < cfg.samples; ++sample) {
    Scenario s;
    s.seed = hash_combine(cfg.seed, static_cast<std::uint64_t>(sample));
    s.chunk_size = cfg.chunk_size;
    for (int i = 0; i < cfg.precursors; ++i) {
      ScenarioAgent a;
      a.id = AgentId{1, i};
      a.model_tag = "precursor";
      a.engine.prefill_rate = cfg.precursor_prefill_rate;
      a.engine.decode_rate = cfg.precursor_decode_rate;
      a.engine.kv_transfer_per_block = cfg.kv_transfer_per_block;
      a.engine.kv_block_tokens = cfg.kv_block_tokens;
      a.engine.prefill_startup_overhead = cfg.prefill_startup_overhead;
      a.prompt_tokens = cfg.precursor_prompt_tokens;
      a.output_len = OutputLenDist::uniform(cfg.out_min, cfg.out_max);
      s.agents.push_back(std::move(a));
    }
    ScenarioAgent agg;
    agg.id = AgentId{2, 0};
    agg.model_tag = "aggregator";
    agg.engine.prefill_rate = cfg.agg_prefill_rate;
    agg.engine.decode_rate = cfg.agg_decode_rate;
    agg.engine.kv_transfer_per_block = cfg.kv_transfer_per_block;
    agg.engine.kv_block_tokens = cfg.kv_block_tokens;
    agg.engine.prefill_startup_overhead = cfg.prefill_startup_overhead;
    for (int i = 0; i < cfg.precursors; ++i) agg.deps.push_back(AgentId{1, i});
    agg.prefix_tokens = cfg.agg_prefix_tokens;
    agg.suffix_tokens = cfg.agg_suffix_tokens;
    agg.output_len = OutputLenDist::fixed_len(cfg.agg_output_tokens);
    s.agents.push_back(std::move(agg));

    for (int m = 0; m < 4; ++m) {
      RunTrace t = run_scenario(s, modes[m]);
      e2e[static_cast<std::size_t>(m)].push_back(t.e2e_latency);
    }
  }

  double seq_mean = mean(e2e[0]);
  for (int m = 0; m < 4; ++m) {
    SecondLayerRow row;
    row.mode = modes[m];
    row.mean_e2e = mean(e2e[static_cast<std::size_t>(m)]);
    row.normalized_vs_sequential = seq_mean > 0 ? row.mean_e2e / seq_mean : 1.0;
    rows.push_back(row);
  }
  return rows;
}

std::string second_layer_csv(const std::vector<SecondLayerRow>& rows) {
  std::ostringstream out;
  out << "mode,mean_e2e_s,normalized_vs_sequential,reduction_vs_sequential\n";
  for (const auto& r : rows) {
    out << to_string(r.mode) << ',' << format_double(r.mean_e2e) << ','
        << format_double(r.normalized_vs_sequential) << ','
        << format_double(1.0 - r.normalized_vs_sequential) << "\n";
  }
  return out.str();
}

}  // namespace moaserve
