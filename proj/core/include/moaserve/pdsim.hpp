#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <queue>
#include <string>
#include <vector>

#include "moaserve/agent.hpp"
#include "moaserve/prompt.hpp"
#include "moaserve/trace.hpp"

namespace moaserve {

// Linear latency model of one serving engine pair plus its KV link.
struct EngineSpec {
  double prefill_rate = 4000.0;           // tokens/s on the prefill engine
  double decode_rate = 60.0;              // tokens/s on the decode engine
  double prefill_startup_overhead = 0.0;  // s charged per prefill request
  double kv_transfer_per_block = 0.0;     // s per KV block moved to the decoder
  int kv_block_tokens = 16;

  void validate(const std::string& where) const;
  static EngineSpec from_profile(const AgentProfile& p);
};

// How a dependent agent's prompt reaches its engines.
//  - SequentialPd:      wait for all precursors, then one /generate
//                       (disaggregated; KV transfer charged).
//  - DpOnly:            same scheduling, but prefill and decode share one
//                       engine, so no KV transfer.
//  - DpChunkedPrefill:  DpOnly with the dependent prompt prefilled in fixed
//                       chunks, each paying the startup overhead.
//  - IncrementalOverlap: dependency-aware incremental prefilling through
//                       /prefill_only while precursors still decode.
enum class ScheduleMode { SequentialPd, DpOnly, DpChunkedPrefill, IncrementalOverlap };

std::string to_string(ScheduleMode m);
ScheduleMode schedule_mode_from_string(const std::string& s);
bool mode_is_disaggregated(ScheduleMode m);
bool mode_is_incremental(ScheduleMode m);

// One decoded chunk as it lands in the producer's output cache.
struct ApcChunk {
  double t = 0.0;
  int begin = 0;  // token offsets within the producer's output
  int end = 0;
  TokenSeq tokens;
};

// Deterministic discrete-event simulator over per-agent prefill/decode
// engine pairs. Ties in the event heap break by scheduling order, so a run
// is a pure function of its inputs.
//
// Requests are one-per-agent. A request's prompt grows through
// submit_prefill_only (contiguous appends only) and is sealed by
// submit_generate, which prefills any remainder, pays one KV transfer and
// decodes the planned output, streaming chunks into the agent prompt cache.
class SimWorld {
 public:
  SimWorld();
  ~SimWorld();
  SimWorld(const SimWorld&) = delete;
  SimWorld& operator=(const SimWorld&) = delete;

  void add_agent(const AgentId& id, const EngineSpec& spec, const std::string& model_tag,
                 bool monolithic);

  // Appends tokens to the request's prompt and schedules their prefill.
  // expected_start must equal the current scheduled prompt length; anything
  // else is an autoregressive-contiguity violation and throws RunError.
  void submit_prefill_only(const AgentId& id, int expected_start, const TokenSeq& tokens);

  // Seals the prompt (full_prompt must extend the already-scheduled prefix),
  // prefills the remainder (split into prefill_chunk-token requests when
  // prefill_chunk > 0), then transfers KV and decodes output. Decoded tokens
  // land in the agent prompt cache every apc_chunk tokens.
  void submit_generate(const AgentId& id, const TokenSeq& full_prompt, const TokenSeq& output,
                       int apc_chunk, int prefill_chunk = 0);

  // Early-exit pruning: stops decode mid-stream (output truncated to what
  // was emitted), drops queued prefill work, closes the cache.
  void cancel(const AgentId& id);

  // Drops the scheduled prompt beyond keep_tokens (a pruned slot is being
  // removed). Already-computed KV past the point is freed and counted as
  // reclaimed; in-flight prefill past it completes as wasted work.
  void reclaim(const AgentId& id, int keep_tokens);

  // Chunk arrivals into id's output cache, in order.
  void on_chunk(const AgentId& id, std::function<void(const ApcChunk&)> cb);
  // Decode completion (not fired on cancel).
  void on_decode_end(const AgentId& id, std::function<void(double t)> cb);

  // Generic deterministic callback (t >= now).
  void schedule(double t, std::function<void()> fn);

  void run();
  double now() const { return now_; }

  // Drivers mark when an agent's inputs became ready so exposed prefill can
  // be computed at finalize.
  void note_precursor_ready(const AgentId& id, double t);
  void mark_empty_input(const AgentId& id);

  // Introspection.
  int scheduled_tokens(const AgentId& id) const;
  int prefilled_tokens(const AgentId& id) const;
  const TokenSeq& prompt(const AgentId& id) const;
  const TokenSeq& output(const AgentId& id) const;
  const std::deque<ApcChunk>& cache(const AgentId& id) const;
  bool finished(const AgentId& id) const;
  bool cancelled(const AgentId& id) const;
  const AgentRecord& record(const AgentId& id) const;

  // Copies per-agent records and emitted events into the trace.
  void finalize_into(RunTrace& trace) const;

  RunTrace& trace() { return trace_; }

 private:
  struct Engine;
  struct Request;

  Request& req(const AgentId& id);
  const Request& req(const AgentId& id) const;
  void pump_prefill(Request& r);
  void start_prefill_job(Request& r);
  void finish_prefill_job(Request& r, int begin, int end, std::uint64_t gen, double started);
  void maybe_begin_transfer(Request& r);
  void begin_decode(Request& r);
  void emit_chunk(Request& r, int begin, std::uint64_t gen);
  void finish_decode(Request& r, std::uint64_t gen);
  void emit(double t, const std::string& kind, const AgentId& id, nlohmann::ordered_json payload);

  double now_ = 0.0;
  std::uint64_t next_heap_seq_ = 0;

  struct HeapItem {
    double t;
    std::uint64_t seq;
    std::function<void()> fn;
  };
  struct HeapCmp {
    bool operator()(const HeapItem& a, const HeapItem& b) const {
      if (a.t != b.t) return a.t > b.t;
      return a.seq > b.seq;
    }
  };
  std::priority_queue<HeapItem, std::vector<HeapItem>, HeapCmp> heap_;

  std::map<AgentId, std::unique_ptr<Request>> requests_;
  RunTrace trace_;
};

// Number of KV blocks a prompt occupies.
int kv_blocks(int prompt_tokens, int kv_block_tokens);

}  // namespace moaserve
