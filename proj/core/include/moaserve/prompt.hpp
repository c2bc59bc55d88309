#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "moaserve/agent.hpp"

namespace moaserve {

// Prompts are opaque token-id sequences; assembly and scheduling only ever
// concatenate, slice, and count them.
using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// One dependency hole in a template: the named precursor's full output is
// spliced in, preceded by an optional separator.
struct SlotSpec {
  AgentId precursor;
  TokenSeq separator;  // may be empty (default)

  bool operator==(const SlotSpec&) const = default;
};

// prefix ++ (separator_1 ++ out_1) ++ ... ++ (separator_k ++ out_k) ++ suffix
class PromptTemplate {
 public:
  PromptTemplate() = default;
  PromptTemplate(TokenSeq prefix, std::vector<SlotSpec> slots, TokenSeq suffix);

  const TokenSeq& prefix() const { return prefix_; }
  const std::vector<SlotSpec>& slots() const { return slots_; }
  const TokenSeq& suffix() const { return suffix_; }

  std::optional<int> slot_of(const AgentId& precursor) const;

  // Re-planning after a precursor was pruned: same template minus its slot.
  PromptTemplate without(const AgentId& pruned) const;

  bool operator==(const PromptTemplate&) const = default;

 private:
  TokenSeq prefix_;
  std::vector<SlotSpec> slots_;
  TokenSeq suffix_;
};

// Token range [begin, end) of one template piece inside an assembled prompt.
struct SegmentRange {
  enum class Kind { Prefix, Separator, Slot, Suffix };

  Kind kind = Kind::Prefix;
  int slot_index = -1;  // which slot a Separator/Slot range belongs to
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const SegmentRange&) const = default;
};

struct AssembledPrompt {
  TokenSeq tokens;
  std::vector<SegmentRange> segments;  // in order, covering tokens exactly
};

// Splices precursor outputs into the template. Every slot's precursor must
// have an entry in outputs (empty outputs are fine); extra entries are
// ignored. Throws ValidationError on a missing precursor.
AssembledPrompt assemble(const PromptTemplate& tmpl,
                         const std::map<AgentId, TokenSeq>& outputs);

// Scheduling view of a template: what can be prefilled immediately and what
// blocks on which precursor. Descriptors appear in prompt order.
struct SegmentDescriptor {
  SegmentRange::Kind kind = SegmentRange::Kind::Prefix;
  int slot_index = -1;
  std::optional<AgentId> blocking;  // precursor gating a Slot descriptor
  TokenSeq literal;                 // known tokens (prefix/separator/suffix)

  bool operator==(const SegmentDescriptor&) const = default;
};

// Zero slots collapse to a single dependency-free descriptor holding
// prefix ++ suffix; empty separators produce no Separator descriptor.
std::vector<SegmentDescriptor> segment(const PromptTemplate& tmpl);

}  // namespace moaserve
