#include "moaserve/pdsim.hpp"

#include <algorithm>
#include <cmath>

#include "moaserve/errors.hpp"

namespace moaserve {

void EngineSpec::validate(const std::string& where) const {
  if (!(prefill_rate > 0)) throw ValidationError(where + ": prefill_rate must be > 0");
  if (!(decode_rate > 0)) throw ValidationError(where + ": decode_rate must be > 0");
  if (prefill_startup_overhead < 0)
    throw ValidationError(where + ": prefill_startup_overhead must be >= 0");
  if (kv_transfer_per_block < 0)
    throw ValidationError(where + ": kv_transfer_per_block must be >= 0");
  if (kv_block_tokens <= 0) throw ValidationError(where + ": kv_block_tokens must be > 0");
}

EngineSpec EngineSpec::from_profile(const AgentProfile& p) {
  EngineSpec s;
  s.prefill_rate = p.prefill_rate;
  s.decode_rate = p.decode_rate;
  return s;
}

std::string to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::SequentialPd: return "sequential-pd";
    case ScheduleMode::DpOnly: return "dp-only";
    case ScheduleMode::DpChunkedPrefill: return "dp-chunked-prefill";
    case ScheduleMode::IncrementalOverlap: return "incremental-overlap";
  }
  return "sequential-pd";
}

ScheduleMode schedule_mode_from_string(const std::string& s) {
  if (s == "sequential-pd") return ScheduleMode::SequentialPd;
  if (s == "dp-only") return ScheduleMode::DpOnly;
  if (s == "dp-chunked-prefill") return ScheduleMode::DpChunkedPrefill;
  if (s == "incremental-overlap") return ScheduleMode::IncrementalOverlap;
  throw ValidationError("mode: expected one of sequential-pd, dp-only, dp-chunked-prefill, "
                        "incremental-overlap; got '" + s + "'");
}

bool mode_is_disaggregated(ScheduleMode m) {
  return m == ScheduleMode::SequentialPd || m == ScheduleMode::IncrementalOverlap;
}

bool mode_is_incremental(ScheduleMode m) { return m == ScheduleMode::IncrementalOverlap; }

int kv_blocks(int prompt_tokens, int kv_block_tokens) {
  if (prompt_tokens <= 0) return 0;
  return (prompt_tokens + kv_block_tokens - 1) / kv_block_tokens;
}

// ---------------------------------------------------------------------------

struct SimWorld::Engine {
  double busy_until = 0.0;
  double busy_accum = 0.0;
  bool job_running = false;
  bool wake_scheduled = false;
};

struct SimWorld::Request {
  AgentId id;
  EngineSpec spec;
  bool monolithic = false;

  TokenSeq prompt;     // scheduled tokens (grows by contiguous appends)
  int prefilled = 0;   // committed contiguous prefix
  int max_computed = 0;
  std::uint64_t gen = 0;

  struct PJob {
    int begin, end;
    std::uint64_t gen;
  };
  std::deque<PJob> queue;

  bool generate_pending = false;
  bool transfer_fired = false;
  TokenSeq output;
  int apc_chunk = 0;
  int prefill_chunk = 0;

  bool decode_started = false;
  bool finished_flag = false;
  bool cancelled_flag = false;
  double decode_start_t = -1.0;

  Engine pe;
  Engine de_storage;
  Engine* de = nullptr;  // aliases pe when monolithic

  std::deque<ApcChunk> apc;
  std::vector<std::function<void(const ApcChunk&)>> chunk_cbs;
  std::vector<std::function<void(double)>> decode_end_cbs;

  AgentRecord rec;
};

SimWorld::SimWorld() = default;
SimWorld::~SimWorld() = default;

SimWorld::Request& SimWorld::req(const AgentId& id) {
  auto it = requests_.find(id);
  if (it == requests_.end()) throw RunError("sim: unknown agent " + id.str());
  return *it->second;
}

const SimWorld::Request& SimWorld::req(const AgentId& id) const {
  auto it = requests_.find(id);
  if (it == requests_.end()) throw RunError("sim: unknown agent " + id.str());
  return *it->second;
}

void SimWorld::add_agent(const AgentId& id, const EngineSpec& spec, const std::string& model_tag,
                         bool monolithic) {
  spec.validate("engine for agent " + id.str());
  if (requests_.count(id)) throw ValidationError("sim: agent " + id.str() + " added twice");
  auto r = std::make_unique<Request>();
  r->id = id;
  r->spec = spec;
  r->monolithic = monolithic;
  r->de = monolithic ? &r->pe : &r->de_storage;
  r->rec.id = id;
  r->rec.model_tag = model_tag;
  r->rec.monolithic = monolithic;
  r->rec.submit_t = now_;
  requests_[id] = std::move(r);
  emit(now_, "open_request", id, nlohmann::ordered_json::object());
}

void SimWorld::emit(double t, const std::string& kind, const AgentId& id,
                    nlohmann::ordered_json payload) {
  trace_.add_event(t, kind, id.str(), std::move(payload));
}

void SimWorld::schedule(double t, std::function<void()> fn) {
  if (t < now_) throw RunError("sim: cannot schedule into the past");
  heap_.push(HeapItem{t, next_heap_seq_++, std::move(fn)});
}

void SimWorld::run() {
  while (!heap_.empty()) {
    HeapItem item = heap_.top();
    heap_.pop();
    now_ = item.t;
    item.fn();
  }
}

void SimWorld::submit_prefill_only(const AgentId& id, int expected_start, const TokenSeq& tokens) {
  Request& r = req(id);
  if (r.cancelled_flag) return;  // late action against a pruned request: drop
  if (r.generate_pending || r.decode_started) {
    throw RunError("sim: prefill_only after generate for agent " + id.str());
  }
  int scheduled = static_cast<int>(r.prompt.size());
  if (expected_start != scheduled) {
    throw RunError("sim: contiguity violation for agent " + id.str() + ": prefill starts at " +
                   std::to_string(expected_start) + " but " + std::to_string(scheduled) +
                   " tokens are scheduled");
  }
  if (tokens.empty()) return;
  r.prompt.insert(r.prompt.end(), tokens.begin(), tokens.end());
  r.rec.prefill_only_calls += 1;
  r.queue.push_back(Request::PJob{scheduled, scheduled + static_cast<int>(tokens.size()), r.gen});
  emit(now_, "prefill_submitted", id,
       {{"start", scheduled}, {"tokens", static_cast<int>(tokens.size())}});
  pump_prefill(r);
}

void SimWorld::submit_generate(const AgentId& id, const TokenSeq& full_prompt,
                               const TokenSeq& output, int apc_chunk, int prefill_chunk) {
  Request& r = req(id);
  if (r.cancelled_flag) return;
  if (r.generate_pending || r.decode_started) {
    throw RunError("sim: generate submitted twice for agent " + id.str());
  }
  int scheduled = static_cast<int>(r.prompt.size());
  if (static_cast<int>(full_prompt.size()) < scheduled ||
      !std::equal(r.prompt.begin(), r.prompt.end(), full_prompt.begin())) {
    throw RunError("sim: generate prompt for agent " + id.str() +
                   " does not extend the prefilled prefix");
  }
  if (apc_chunk <= 0) throw ValidationError("sim: apc_chunk must be > 0");

  int remainder = static_cast<int>(full_prompt.size()) - scheduled;
  r.prompt = full_prompt;
  r.output = output;
  r.apc_chunk = apc_chunk;
  r.prefill_chunk = prefill_chunk;
  r.generate_pending = true;
  r.rec.prompt_tokens = static_cast<int>(full_prompt.size());
  r.rec.invoked = true;
  emit(now_, "generate_submitted", id,
       {{"prompt_tokens", static_cast<int>(full_prompt.size())},
        {"remainder", remainder},
        {"output_tokens", static_cast<int>(output.size())}});

  if (remainder > 0) {
    int step = prefill_chunk > 0 ? prefill_chunk : remainder;
    for (int b = scheduled; b < static_cast<int>(full_prompt.size()); b += step) {
      int e = std::min(b + step, static_cast<int>(full_prompt.size()));
      r.queue.push_back(Request::PJob{b, e, r.gen});
    }
    pump_prefill(r);
  } else {
    maybe_begin_transfer(r);
  }
}

void SimWorld::pump_prefill(Request& r) {
  if (r.pe.job_running || r.queue.empty()) return;
  if (now_ < r.pe.busy_until) {
    if (!r.pe.wake_scheduled) {
      r.pe.wake_scheduled = true;
      AgentId id = r.id;
      schedule(r.pe.busy_until, [this, id]() {
        Request& rr = req(id);
        rr.pe.wake_scheduled = false;
        pump_prefill(rr);
      });
    }
    return;
  }
  start_prefill_job(r);
}

void SimWorld::start_prefill_job(Request& r) {
  Request::PJob job = r.queue.front();
  r.queue.pop_front();
  double dur = r.spec.prefill_startup_overhead +
               static_cast<double>(job.end - job.begin) / r.spec.prefill_rate;
  double started = now_;
  r.pe.job_running = true;
  r.pe.busy_until = now_ + dur;
  r.pe.busy_accum += dur;
  emit(now_, "prefill_start", r.id, {{"begin", job.begin}, {"end", job.end}});
  AgentId id = r.id;
  schedule(now_ + dur, [this, id, job, started]() {
    finish_prefill_job(req(id), job.begin, job.end, job.gen, started);
  });
}

void SimWorld::finish_prefill_job(Request& r, int begin, int end, std::uint64_t gen,
                                  double started) {
  r.pe.job_running = false;
  bool live = gen == r.gen;
  int recomputed = std::max(0, std::min(end, r.max_computed) - begin);
  r.max_computed = std::max(r.max_computed, end);

  PrefillInterval interval;
  interval.start = started;
  interval.end = now_;
  interval.begin_token = begin;
  interval.end_token = end;
  interval.wasted = !live;
  r.rec.prefill.push_back(interval);
  r.rec.recomputed_tokens += recomputed;
  if (!live) r.rec.wasted_prefill_tokens += end - begin;

  emit(now_, "prefill_end", r.id,
       {{"begin", begin}, {"end", end}, {"wasted", !live}, {"recomputed", recomputed}});

  if (live) {
    if (begin != r.prefilled) {
      throw RunError("sim: internal contiguity breach for agent " + r.id.str());
    }
    r.prefilled = end;
  }
  pump_prefill(r);
  if (live) maybe_begin_transfer(r);
}

void SimWorld::maybe_begin_transfer(Request& r) {
  if (!r.generate_pending || r.transfer_fired) return;
  if (r.prefilled != static_cast<int>(r.prompt.size())) return;
  r.transfer_fired = true;

  double dur = 0.0;
  if (!r.monolithic && r.spec.kv_transfer_per_block > 0.0) {
    dur = r.spec.kv_transfer_per_block *
          kv_blocks(static_cast<int>(r.prompt.size()), r.spec.kv_block_tokens);
  }
  r.rec.transfer_seconds = dur;
  AgentId id = r.id;
  if (dur > 0.0) {
    emit(now_, "transfer_start", r.id,
         {{"blocks", kv_blocks(static_cast<int>(r.prompt.size()), r.spec.kv_block_tokens)},
          {"seconds", dur}});
    std::uint64_t gen = r.gen;
    schedule(now_ + dur, [this, id, gen]() {
      Request& rr = req(id);
      if (gen != rr.gen) return;
      rr.rec.transfer_end = now_;
      emit(now_, "transfer_end", id, {});
      begin_decode(rr);
    });
  } else {
    r.rec.transfer_end = now_;
    begin_decode(r);
  }
}

void SimWorld::begin_decode(Request& r) {
  if (r.cancelled_flag) return;
  if (now_ < r.de->busy_until) {
    AgentId id = r.id;
    std::uint64_t gen = r.gen;
    schedule(r.de->busy_until, [this, id, gen]() {
      Request& rr = req(id);
      if (gen != rr.gen) return;
      begin_decode(rr);
    });
    return;
  }
  r.generate_pending = false;
  r.decode_started = true;
  r.decode_start_t = now_;
  r.rec.decode_start = now_;
  int out = static_cast<int>(r.output.size());
  double dur = static_cast<double>(out) / r.spec.decode_rate;
  r.de->busy_until = now_ + dur;
  r.de->busy_accum += dur;
  emit(now_, "decode_start", r.id, {{"output_tokens", out}});
  std::uint64_t gen = r.gen;
  if (out == 0) {
    AgentId id = r.id;
    schedule(now_, [this, id, gen]() { finish_decode(req(id), gen); });
  } else {
    emit_chunk(r, 0, gen);
  }
}

void SimWorld::emit_chunk(Request& r, int begin, std::uint64_t gen) {
  int out = static_cast<int>(r.output.size());
  int end = std::min(begin + r.apc_chunk, out);
  double t = r.decode_start_t + static_cast<double>(end) / r.spec.decode_rate;
  AgentId id = r.id;
  schedule(t, [this, id, begin, end, gen]() {
    Request& rr = req(id);
    if (gen != rr.gen) return;
    ApcChunk chunk;
    chunk.t = now_;
    chunk.begin = begin;
    chunk.end = end;
    chunk.tokens.assign(rr.output.begin() + begin, rr.output.begin() + end);
    rr.apc.push_back(chunk);
    emit(now_, "chunk", id, {{"begin", begin}, {"end", end}});
    for (const auto& cb : rr.chunk_cbs) cb(rr.apc.back());
    if (gen != rr.gen) return;  // a callback may have cancelled us
    if (end < static_cast<int>(rr.output.size())) {
      emit_chunk(rr, end, gen);
    } else {
      schedule(now_, [this, id, gen]() { finish_decode(req(id), gen); });
    }
  });
}

void SimWorld::finish_decode(Request& r, std::uint64_t gen) {
  if (gen != r.gen || r.finished_flag) return;
  r.finished_flag = true;
  r.rec.decode_end = now_;
  r.rec.complete_t = now_;
  r.rec.output_tokens = static_cast<int>(r.output.size());
  emit(now_, "decode_end", r.id, {{"output_tokens", r.rec.output_tokens}});
  for (const auto& cb : r.decode_end_cbs) cb(now_);
}

void SimWorld::cancel(const AgentId& id) {
  Request& r = req(id);
  if (r.finished_flag) throw RunError("sim: cancel after completion for agent " + id.str());
  if (r.cancelled_flag) return;
  r.cancelled_flag = true;
  r.rec.pruned = true;
  r.gen += 1;  // invalidates in-flight prefill, chunks, decode end
  r.queue.clear();
  r.generate_pending = false;

  int emitted = 0;
  if (r.decode_started) {
    emitted = static_cast<int>(std::floor((now_ - r.decode_start_t) * r.spec.decode_rate + 1e-9));
    emitted = std::clamp(emitted, 0, static_cast<int>(r.output.size()));
    r.output.resize(static_cast<std::size_t>(emitted));
    // release the decode engine for accounting purposes
    double unused = r.de->busy_until - now_;
    if (unused > 0) {
      r.de->busy_accum -= unused;
      r.de->busy_until = now_;
    }
  }
  r.rec.output_tokens = emitted;
  emit(now_, "cancel", id, {{"emitted", emitted}});
}

void SimWorld::reclaim(const AgentId& id, int keep_tokens) {
  Request& r = req(id);
  if (r.generate_pending || r.decode_started) {
    throw RunError("sim: reclaim after generate for agent " + id.str());
  }
  int scheduled = static_cast<int>(r.prompt.size());
  if (keep_tokens < 0 || keep_tokens > scheduled) {
    throw RunError("sim: reclaim point " + std::to_string(keep_tokens) +
                   " outside scheduled prompt of " + std::to_string(scheduled) + " tokens");
  }
  r.gen += 1;  // in-flight prefill completes as wasted work
  r.queue.clear();
  r.prompt.resize(static_cast<std::size_t>(keep_tokens));
  if (r.prefilled > keep_tokens) {
    r.rec.reclaimed_tokens += r.prefilled - keep_tokens;
    r.prefilled = keep_tokens;
  }
  emit(now_, "reclaim", id, {{"keep", keep_tokens}, {"was_scheduled", scheduled}});
}

void SimWorld::on_chunk(const AgentId& id, std::function<void(const ApcChunk&)> cb) {
  req(id).chunk_cbs.push_back(std::move(cb));
}

void SimWorld::on_decode_end(const AgentId& id, std::function<void(double)> cb) {
  req(id).decode_end_cbs.push_back(std::move(cb));
}

void SimWorld::note_precursor_ready(const AgentId& id, double t) {
  Request& r = req(id);
  r.rec.precursor_ready_t = std::max(r.rec.precursor_ready_t, t);
}

void SimWorld::mark_empty_input(const AgentId& id) {
  Request& r = req(id);
  r.rec.empty_input = true;
  emit(now_, "empty_input", id, {});
}

int SimWorld::scheduled_tokens(const AgentId& id) const {
  return static_cast<int>(req(id).prompt.size());
}
int SimWorld::prefilled_tokens(const AgentId& id) const { return req(id).prefilled; }
const TokenSeq& SimWorld::prompt(const AgentId& id) const { return req(id).prompt; }
const TokenSeq& SimWorld::output(const AgentId& id) const { return req(id).output; }
const std::deque<ApcChunk>& SimWorld::cache(const AgentId& id) const { return req(id).apc; }
bool SimWorld::finished(const AgentId& id) const { return req(id).finished_flag; }
bool SimWorld::cancelled(const AgentId& id) const { return req(id).cancelled_flag; }
const AgentRecord& SimWorld::record(const AgentId& id) const { return req(id).rec; }

void SimWorld::finalize_into(RunTrace& trace) const {
  for (const auto& [id, r] : requests_) {
    AgentRecord rec = r->rec;
    rec.pe_busy = r->pe.busy_accum;
    rec.de_busy = r->monolithic ? 0.0 : r->de->busy_accum;

    double last_prefill_end = 0.0;
    for (const auto& p : rec.prefill) {
      if (!p.wasted) last_prefill_end = std::max(last_prefill_end, p.end);
    }
    double hidden_behind = std::max(rec.precursor_ready_t, rec.submit_t);
    rec.exposed_prefill = std::max(0.0, last_prefill_end - hidden_behind);
    trace.agents[id] = std::move(rec);
  }
  for (const auto& e : trace_.events) {
    trace.add_event(e.t, e.kind, e.agent == "" ? "" : e.agent, e.payload);
  }
  trace.roll_up();
}

}  // namespace moaserve
