#pragma once

#include <map>
#include <vector>

#include "moaserve/prompt.hpp"

namespace moaserve {

// One instruction a shell router hands to its serving backend.
struct RouteAction {
  enum class Kind { PrefillOnly, Generate, Reclaim };

  Kind kind = Kind::PrefillOnly;
  int start = 0;     // PrefillOnly: offset of the increment; Reclaim: keep point
  TokenSeq tokens;   // PrefillOnly: the increment; Generate: the full prompt
};

// Shell router for one dependent agent: a pure state machine implementing
// the slot-filling protocol, independent of any transport.
//
//   1. identify dependencies (the template's slots, in prompt order)
//   2. issue the dependency-free prefix (plus the first separator) and
//      monitor the first slot
//   3. as the active slot's producer streams chunks, append and prefill them
//      incrementally; later slots buffer until every earlier slot is done
//      (prefilled KV must stay a contiguous prefix of the final prompt)
//   4. once the last slot and the suffix are placed, forward one generate
//
// In non-incremental mode the router only buffers and emits a single
// Generate when every producer has finished.
//
// A pruned producer removes its slot: buffered content is dropped, and if
// the slot had already started prefilling, a Reclaim rolls the engine back
// to the slot's start before filling continues.
class SlotPlan {
 public:
  SlotPlan(AgentId self, PromptTemplate tmpl, bool incremental);

  std::vector<RouteAction> start();
  std::vector<RouteAction> on_chunk(const AgentId& producer, const TokenSeq& tokens);
  std::vector<RouteAction> on_precursor_done(const AgentId& producer);
  std::vector<RouteAction> on_precursor_cancelled(const AgentId& producer);

  enum class SlotPhase { Waiting, Filling, Complete };

  struct SlotState {
    SlotSpec spec;
    SlotPhase phase = SlotPhase::Waiting;
    TokenSeq received;     // producer output accumulated so far
    int issued = 0;        // how much of received went to the engine
    bool sep_issued = false;
    bool closed = false;   // producer finished decoding
    int mark = 0;          // engine offset where this slot (separator) begins
  };

  const AgentId& self() const { return self_; }
  const PromptTemplate& current_template() const { return tmpl_; }
  const std::vector<SlotState>& slots() const { return slots_; }
  int active_slot() const { return active_ < static_cast<int>(slots_.size()) ? active_ : -1; }
  bool started() const { return started_; }
  bool generate_issued() const { return generate_issued_; }
  int scheduled() const { return scheduled_; }
  int prefill_only_calls() const { return calls_; }
  int reclaims() const { return reclaims_; }
  bool all_inputs_pruned() const { return had_slots_ && slots_.empty(); }
  const TokenSeq& final_prompt() const;
  std::map<AgentId, TokenSeq> outputs() const;

 private:
  int slot_index(const AgentId& producer) const;  // -1 when absent
  std::vector<RouteAction> advance();
  void flush(std::vector<RouteAction>& out);

  AgentId self_;
  PromptTemplate tmpl_;
  bool incremental_ = true;
  bool started_ = false;
  bool had_slots_ = false;
  std::vector<SlotState> slots_;
  int active_ = 0;
  bool suffix_issued_ = false;
  int scheduled_ = 0;       // tokens handed to the engine so far
  int calls_ = 0;
  int reclaims_ = 0;
  TokenSeq pending_;        // accumulates within one advance(); empty between calls
  TokenSeq issued_stream_;  // exactly what the engine was told to prefill
  bool generate_issued_ = false;
  TokenSeq final_prompt_;
};

}  // namespace moaserve
