#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moaserve/pdsim.hpp"
#include "moaserve/router.hpp"

namespace httplib {
class Server;
}

namespace moaserve {

// Arithmetic serving engine behind the split prefill/generate interface.
// Time is virtual: each call advances a per-request engine frontier using the
// same linear laws as the simulator, and the response reports the computed
// schedule instead of sleeping through it.
//
// Request bodies (JSON):
//   POST /prefill_only {"agent": "2:0", "start": 0, "tokens": [...],
//                       "t": <submit time, optional>}
//     -> {"agent", "start", "end", "t_start", "t_end"}
//   POST /generate     {"agent", "prompt": [...], "output": [...] or
//                       "output_tokens": n, "chunk_size": optional, "t": optional}
//     -> {"agent", "prompt_tokens", "remainder", "prefill_end",
//         "transfer_seconds", "decode_start", "decode_end",
//         "chunks": [{"t", "begin", "end", "tokens"}...]}
//   POST /reclaim      {"agent", "keep"} -> {"agent", "scheduled"}
//   GET  /healthz      -> {"ok": true}
// Errors return HTTP 400 with {"error": "..."} (contiguity violations,
// malformed bodies) — the same conditions the simulator throws on.
class EngineService {
 public:
  EngineService(EngineSpec spec, int default_chunk_size = 32);

  nlohmann::ordered_json prefill_only(const nlohmann::ordered_json& body);
  nlohmann::ordered_json generate(const nlohmann::ordered_json& body);
  nlohmann::ordered_json reclaim(const nlohmann::ordered_json& body);

  // Registers all routes; attach_without_prefill registers only /generate
  // (+ /healthz), emulating a backend that lacks the split entrypoint.
  void attach(httplib::Server& server);
  void attach_without_prefill(httplib::Server& server);

  int prefill_only_calls() const;
  int generate_calls() const;

 private:
  struct RequestState {
    TokenSeq prompt;
    double pe_free_at = 0.0;
    bool generated = false;
  };

  RequestState& state_for(const std::string& agent);

  EngineSpec spec_;
  int default_chunk_size_;
  mutable std::mutex mu_;
  std::map<std::string, RequestState> requests_;
  int prefill_calls_ = 0;
  int generate_calls_ = 0;
};

// Backend for a live shell router: how actions reach an engine service.
class EngineBackend {
 public:
  virtual ~EngineBackend() = default;

  // Returns false when the backend has no split prefill entrypoint (the
  // router then degrades to accumulate-then-generate).
  virtual bool prefill_only(const AgentId& agent, int start, const TokenSeq& tokens) = 0;
  virtual nlohmann::ordered_json generate(const AgentId& agent, const TokenSeq& prompt) = 0;
  virtual void reclaim(const AgentId& agent, int keep) = 0;
};

// HTTP client backend speaking the EngineService protocol.
class HttpEngineBackend : public EngineBackend {
 public:
  explicit HttpEngineBackend(const std::string& base_url, int timeout_s = 30);
  ~HttpEngineBackend() override;

  bool prefill_only(const AgentId& agent, int start, const TokenSeq& tokens) override;
  nlohmann::ordered_json generate(const AgentId& agent, const TokenSeq& prompt) override;
  void reclaim(const AgentId& agent, int keep) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Live-mode shell router: feeds one slot plan's actions to a backend as
// precursor chunks and completions arrive.
//
//  - Degradation: when the backend rejects the split entrypoint (HTTP 404),
//    every pending and future increment is folded into the terminal generate
//    call; the decoded-against prompt is unchanged.
//  - Throttle: with min_tokens_per_call > 0, consecutive increments are
//    coalesced until at least that many tokens are pending (boundaries:
//    slot rollback and the terminal generate always flush first).
class HttpShellRouter {
 public:
  HttpShellRouter(EngineBackend& backend, AgentId self, PromptTemplate tmpl, bool incremental,
                  int min_tokens_per_call = 0);

  void start();
  void on_chunk(const AgentId& producer, const TokenSeq& tokens);
  void on_precursor_done(const AgentId& producer);
  void on_precursor_cancelled(const AgentId& producer);

  bool done() const { return done_; }
  bool degraded() const { return degraded_; }
  const nlohmann::ordered_json& generate_response() const;
  const SlotPlan& plan() const { return plan_; }

 private:
  void apply(const std::vector<RouteAction>& actions);
  void flush_buffer();

  EngineBackend& backend_;
  SlotPlan plan_;
  int min_tokens_per_call_;
  bool degraded_ = false;
  bool done_ = false;
  int buffer_start_ = -1;  // engine offset of the coalescing buffer
  TokenSeq buffer_;
  nlohmann::ordered_json generate_response_;
};

}  // namespace moaserve
