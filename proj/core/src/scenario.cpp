#include "moaserve/scenario.hpp"

#include <algorithm>
#include <set>

#include "moaserve/errors.hpp"

namespace moaserve {

SimDriver::SimDriver(SimWorld& world, ScheduleMode mode, int chunk_size)
    : world_(world), mode_(mode), chunk_size_(chunk_size) {
  if (chunk_size <= 0) throw ValidationError("driver: chunk_size must be > 0");
}

const SlotPlan& SimDriver::plan(const AgentId& id) const {
  auto it = plans_.find(id);
  if (it == plans_.end()) throw RunError("driver: no plan for agent " + id.str());
  return it->second;
}

int SimDriver::prefill_chunk_for(const AgentId& id) const {
  // Chunked prefill splits the dependency-bearing prompt; independent
  // prompts go down in one piece in every mode.
  if (mode_ == ScheduleMode::DpChunkedPrefill && dependent_.at(id)) return chunk_size_;
  return 0;
}

void SimDriver::add_source(const AgentId& id, const EngineSpec& spec,
                           const std::string& model_tag, TokenSeq prompt, TokenSeq output) {
  world_.add_agent(id, spec, model_tag, !mode_is_disaggregated(mode_));
  order_.push_back(id);
  dependent_[id] = false;
  planned_output_[id] = std::move(output);
  plans_.emplace(id, SlotPlan(id, PromptTemplate(std::move(prompt), {}, {}), false));
}

void SimDriver::add_plan(const AgentId& id, const EngineSpec& spec, const std::string& model_tag,
                         PromptTemplate tmpl, TokenSeq output) {
  world_.add_agent(id, spec, model_tag, !mode_is_disaggregated(mode_));
  order_.push_back(id);
  dependent_[id] = !tmpl.slots().empty();
  planned_output_[id] = std::move(output);
  for (const auto& slot : tmpl.slots()) consumers_[slot.precursor].push_back(id);
  plans_.emplace(id, SlotPlan(id, std::move(tmpl), mode_is_incremental(mode_)));
}

void SimDriver::start() {
  if (started_) throw RunError("driver: started twice");
  started_ = true;
  // Wire callbacks only once every agent exists; declaration order is free.
  for (const auto& [dep, consumers] : consumers_) {
    for (const auto& consumer : consumers) {
      const AgentId c = consumer;
      const AgentId d = dep;
      world_.on_chunk(d, [this, c, d](const ApcChunk& chunk) {
        apply(c, plans_.at(c).on_chunk(d, chunk.tokens));
      });
    }
  }
  for (const auto& id : order_) {
    world_.on_decode_end(id, [this, id](double t) { on_completion(id, t); });
  }
  for (const auto& id : order_) {
    apply(id, plans_.at(id).start());
  }
}

void SimDriver::apply(const AgentId& id, const std::vector<RouteAction>& actions) {
  for (const auto& a : actions) {
    switch (a.kind) {
      case RouteAction::Kind::PrefillOnly:
        world_.submit_prefill_only(id, a.start, a.tokens);
        break;
      case RouteAction::Kind::Generate:
        world_.submit_generate(id, a.tokens, planned_output_.at(id), chunk_size_,
                               prefill_chunk_for(id));
        break;
      case RouteAction::Kind::Reclaim:
        world_.reclaim(id, a.start);
        break;
    }
  }
}

void SimDriver::set_completion_gate(std::function<void(const AgentId&, double)> gate) {
  gate_ = std::move(gate);
}

void SimDriver::on_completion(const AgentId& producer, double t) {
  if (gate_) {
    gate_(producer, t);
    return;
  }
  release(producer);
}

void SimDriver::release(const AgentId& producer) {
  double t = world_.now();
  auto it = consumers_.find(producer);
  if (it == consumers_.end()) return;
  for (const auto& consumer : it->second) {
    world_.note_precursor_ready(consumer, t);
    apply(consumer, plans_.at(consumer).on_precursor_done(producer));
  }
}

void SimDriver::prune(const AgentId& producer) {
  world_.cancel(producer);
  auto it = consumers_.find(producer);
  if (it == consumers_.end()) return;
  for (const auto& consumer : it->second) {
    auto& plan = plans_.at(consumer);
    apply(consumer, plan.on_precursor_cancelled(producer));
    if (plan.all_inputs_pruned()) world_.mark_empty_input(consumer);
  }
}

// ---------------------------------------------------------------------------

void Scenario::validate() const {
  if (agents.empty()) throw ValidationError("scenario: needs at least one agent");
  if (chunk_size <= 0) throw ValidationError("scenario: chunk_size must be > 0");
  std::set<AgentId> ids;
  for (const auto& a : agents) {
    if (!ids.insert(a.id).second) {
      throw ValidationError("scenario: duplicate agent " + a.id.str());
    }
  }
  for (const auto& a : agents) {
    a.engine.validate("scenario agent " + a.id.str());
    a.output_len.validate("scenario agent " + a.id.str());
    if (a.prompt_tokens < 0 || a.prefix_tokens < 0 || a.separator_tokens < 0 ||
        a.suffix_tokens < 0) {
      throw ValidationError("scenario agent " + a.id.str() + ": token counts must be >= 0");
    }
    std::set<AgentId> seen;
    for (const auto& d : a.deps) {
      if (!ids.count(d)) {
        throw ValidationError("scenario agent " + a.id.str() + ": unknown dependency " + d.str());
      }
      if (d == a.id) {
        throw ValidationError("scenario agent " + a.id.str() + " depends on itself");
      }
      if (!seen.insert(d).second) {
        throw ValidationError("scenario agent " + a.id.str() + ": duplicate dependency " +
                              d.str());
      }
    }
  }
  // Cycle check: repeatedly peel agents whose deps are all peeled.
  std::set<AgentId> done;
  bool progressed = true;
  while (progressed) {
    progressed = false;
    for (const auto& a : agents) {
      if (done.count(a.id)) continue;
      bool ready = std::all_of(a.deps.begin(), a.deps.end(),
                               [&done](const AgentId& d) { return done.count(d) > 0; });
      if (ready) {
        done.insert(a.id);
        progressed = true;
      }
    }
  }
  if (done.size() != agents.size()) {
    throw ValidationError("scenario: cyclic dependency among agents");
  }
}

nlohmann::ordered_json Scenario::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = to_string(mode);
  j["chunk_size"] = chunk_size;
  j["seed"] = seed;
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& a : agents) {
    nlohmann::ordered_json aj;
    aj["id"] = a.id.str();
    aj["model_tag"] = a.model_tag;
    aj["prefill_rate"] = a.engine.prefill_rate;
    aj["decode_rate"] = a.engine.decode_rate;
    aj["prefill_startup_overhead"] = a.engine.prefill_startup_overhead;
    aj["kv_transfer_per_block"] = a.engine.kv_transfer_per_block;
    aj["kv_block_tokens"] = a.engine.kv_block_tokens;
    if (a.deps.empty()) {
      aj["prompt_tokens"] = a.prompt_tokens;
    } else {
      nlohmann::ordered_json deps = nlohmann::ordered_json::array();
      for (const auto& d : a.deps) deps.push_back(d.str());
      aj["deps"] = std::move(deps);
      aj["prefix_tokens"] = a.prefix_tokens;
      aj["separator_tokens"] = a.separator_tokens;
      aj["suffix_tokens"] = a.suffix_tokens;
    }
    switch (a.output_len.kind) {
      case OutputLenDist::Kind::Fixed:
        aj["output_len"] = {{"kind", "fixed"}, {"tokens", a.output_len.fixed}};
        break;
      case OutputLenDist::Kind::Uniform:
        aj["output_len"] = {{"kind", "uniform"}, {"min", a.output_len.lo}, {"max", a.output_len.hi}};
        break;
      case OutputLenDist::Kind::Empirical:
        aj["output_len"] = {{"kind", "empirical"}, {"values", a.output_len.values}};
        break;
    }
    arr.push_back(std::move(aj));
  }
  j["agents"] = std::move(arr);
  return j;
}

Scenario Scenario::from_json(const nlohmann::ordered_json& j) {
  Scenario s;
  if (j.contains("mode")) s.mode = schedule_mode_from_string(j.at("mode").get<std::string>());
  s.chunk_size = j.value("chunk_size", 32);
  s.seed = j.value("seed", std::uint64_t{0});
  if (!j.contains("agents") || !j.at("agents").is_array()) {
    throw ValidationError("scenario: 'agents' array required");
  }
  for (const auto& aj : j.at("agents")) {
    ScenarioAgent a;
    a.id = AgentId::parse(aj.at("id").get<std::string>());
    a.model_tag = aj.value("model_tag", a.model_tag);
    a.engine.prefill_rate = aj.value("prefill_rate", a.engine.prefill_rate);
    a.engine.decode_rate = aj.value("decode_rate", a.engine.decode_rate);
    a.engine.prefill_startup_overhead =
        aj.value("prefill_startup_overhead", a.engine.prefill_startup_overhead);
    a.engine.kv_transfer_per_block = aj.value("kv_transfer_per_block", a.engine.kv_transfer_per_block);
    a.engine.kv_block_tokens = aj.value("kv_block_tokens", a.engine.kv_block_tokens);
    a.prompt_tokens = aj.value("prompt_tokens", 0);
    if (aj.contains("deps")) {
      for (const auto& d : aj.at("deps")) a.deps.push_back(AgentId::parse(d.get<std::string>()));
      a.prefix_tokens = aj.value("prefix_tokens", 0);
      a.separator_tokens = aj.value("separator_tokens", 0);
      a.suffix_tokens = aj.value("suffix_tokens", 0);
    }
    if (aj.contains("output_len")) {
      const auto& oj = aj.at("output_len");
      std::string kind = oj.value("kind", "fixed");
      if (kind == "fixed") {
        a.output_len = OutputLenDist::fixed_len(oj.value("tokens", 16));
      } else if (kind == "uniform") {
        a.output_len = OutputLenDist::uniform(oj.value("min", 1), oj.value("max", 1));
      } else if (kind == "empirical") {
        a.output_len = OutputLenDist::empirical(oj.at("values").get<std::vector<int>>());
      } else {
        throw ValidationError("scenario agent " + a.id.str() + ": unknown output_len kind '" +
                              kind + "'");
      }
    }
    s.agents.push_back(std::move(a));
  }
  s.validate();
  return s;
}

TokenSeq synth_tokens(std::uint64_t seed, const std::string& label, int count) {
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    out.push_back(static_cast<Token>(hash_u64(seed, label, static_cast<std::uint64_t>(i)) % 50000));
  }
  return out;
}

int sampled_output_len(const Scenario& s, const ScenarioAgent& a) {
  RngStream rng = RngStream::derive(s.seed, "outlen:" + a.id.str());
  return a.output_len.sample(rng);
}

RunTrace run_scenario(const Scenario& s) { return run_scenario(s, s.mode); }

RunTrace run_scenario(const Scenario& s, ScheduleMode mode) {
  return run_scenario(s, mode, {});
}

RunTrace run_scenario(const Scenario& s, ScheduleMode mode,
                      const std::function<void(const SimWorld&, const SimDriver&)>& inspect) {
  s.validate();
  SimWorld world;
  SimDriver driver(world, mode, s.chunk_size);

  for (const auto& a : s.agents) {
    TokenSeq output = synth_tokens(s.seed, "output:" + a.id.str(), sampled_output_len(s, a));
    if (a.deps.empty()) {
      driver.add_source(a.id, a.engine, a.model_tag,
                        synth_tokens(s.seed, "prompt:" + a.id.str(), a.prompt_tokens),
                        std::move(output));
    } else {
      std::vector<SlotSpec> slots;
      slots.reserve(a.deps.size());
      for (std::size_t k = 0; k < a.deps.size(); ++k) {
        SlotSpec slot;
        slot.precursor = a.deps[k];
        slot.separator = synth_tokens(s.seed, "sep:" + a.id.str() + ":" + std::to_string(k),
                                      a.separator_tokens);
        slots.push_back(std::move(slot));
      }
      PromptTemplate tmpl(synth_tokens(s.seed, "prefix:" + a.id.str(), a.prefix_tokens),
                          std::move(slots),
                          synth_tokens(s.seed, "suffix:" + a.id.str(), a.suffix_tokens));
      driver.add_plan(a.id, a.engine, a.model_tag, std::move(tmpl), std::move(output));
    }
  }

  driver.start();
  world.run();
  if (inspect) inspect(world, driver);

  RunTrace trace;
  trace.mode_label = to_string(mode);
  trace.seed = s.seed;
  world.finalize_into(trace);
  double e2e = 0.0;
  for (const auto& [id, rec] : trace.agents) e2e = std::max(e2e, rec.complete_t);
  trace.e2e_latency = e2e;
  trace.roll_up();
  return trace;
}

}  // namespace moaserve
