#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moaserve/agent.hpp"
#include "moaserve/metricq.hpp"

namespace moaserve {

// One timestamped simulator event. seq is the emission index: events with
// equal timestamps keep their execution order.
struct TraceEvent {
  double t = 0.0;
  std::uint64_t seq = 0;
  std::string kind;
  std::string agent;  // "" for run-level events
  nlohmann::ordered_json payload = nlohmann::ordered_json::object();
};

struct PrefillInterval {
  double start = 0.0;
  double end = 0.0;
  int begin_token = 0;
  int end_token = 0;
  bool wasted = false;  // completed after its request was cancelled or reclaimed
};

// Per-agent roll-up of one run.
struct AgentRecord {
  AgentId id;
  std::string model_tag;
  bool monolithic = false;    // prefill and decode share one engine (no transfer)
  bool invoked = false;       // produced (or started producing) an output
  bool pruned = false;        // cancelled by an early-exit decision
  bool empty_input = false;   // every precursor was pruned; ran on prefix+suffix only

  double submit_t = 0.0;
  double precursor_ready_t = 0.0;  // when the last surviving precursor finished
  int prompt_tokens = 0;
  int output_tokens = 0;

  std::vector<PrefillInterval> prefill;
  int prefill_only_calls = 0;
  int recomputed_tokens = 0;
  int reclaimed_tokens = 0;
  int wasted_prefill_tokens = 0;

  double transfer_seconds = 0.0;
  double transfer_end = -1.0;
  double decode_start = -1.0;
  double decode_end = -1.0;
  double complete_t = -1.0;

  // Prefill time not hidden behind waiting for precursors.
  double exposed_prefill = 0.0;

  double pe_busy = 0.0;
  double de_busy = 0.0;
};

// One quality evaluation: which completion triggered it, the full score, the
// exit decision, and who got pruned as a consequence.
struct MetricQRecord {
  double t = 0.0;
  std::string group;
  int eval_index = 0;
  AgentId completed;
  bool evaluated = false;  // false when the group had already exited
  QualityScore score;
  ExitDecision decision;
  std::vector<AgentId> pruned;
};

struct ModelActivation {
  int instances = 0;
  int invoked = 0;
  int pruned = 0;
};

// Full record of one simulated query: events, per-agent records, quality
// evaluations, and run-level metrics. Serializes to JSONL (one record per
// line) and to a per-agent CSV summary; both are byte-stable for a fixed
// seed and config.
struct RunTrace {
  std::string mode_label;
  std::uint64_t seed = 0;
  int sample_index = 0;

  double e2e_latency = 0.0;
  double horizon = 0.0;  // last event time
  int ee_evals = 0;
  double ee_latency_total = 0.0;
  double ee_latency_share = 0.0;
  int prefill_only_calls_total = 0;
  int recomputed_tokens_total = 0;
  int reclaimed_tokens_total = 0;
  int wasted_prefill_tokens_total = 0;

  std::map<std::string, ModelActivation> activation;
  std::vector<TraceEvent> events;
  std::map<AgentId, AgentRecord> agents;
  std::vector<MetricQRecord> metricq;

  void add_event(double t, const std::string& kind, const std::string& agent,
                 nlohmann::ordered_json payload = nlohmann::ordered_json::object());

  // Recomputes the *_total fields and activation counters from the records.
  void roll_up();

  std::string to_jsonl() const;
  static RunTrace from_jsonl(std::istream& in);
  static RunTrace from_jsonl_string(const std::string& s);

  // Per-agent summary table; one row per agent in id order.
  std::string agents_csv() const;

  bool operator==(const RunTrace& other) const { return to_jsonl() == other.to_jsonl(); }
};

nlohmann::ordered_json to_json(const QualityScore& qs);
QualityScore quality_score_from_json(const nlohmann::ordered_json& j);

// Shortest round-trip decimal form (what the JSON layer emits); used for CSV
// cells too so both outputs stay byte-stable.
std::string format_double(double v);

}  // namespace moaserve
