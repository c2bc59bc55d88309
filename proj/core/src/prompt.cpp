#include "moaserve/prompt.hpp"

#include <algorithm>
#include <set>

namespace moaserve {

PromptTemplate::PromptTemplate(TokenSeq prefix, std::vector<SlotSpec> slots, TokenSeq suffix)
    : prefix_(std::move(prefix)), slots_(std::move(slots)), suffix_(std::move(suffix)) {
  std::set<AgentId> seen;
  for (const auto& s : slots_) {
    if (!seen.insert(s.precursor).second) {
      throw ValidationError("prompt template: precursor " + s.precursor.str() +
                            " appears in more than one slot");
    }
  }
}

std::optional<int> PromptTemplate::slot_of(const AgentId& precursor) const {
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].precursor == precursor) return static_cast<int>(i);
  }
  return std::nullopt;
}

PromptTemplate PromptTemplate::without(const AgentId& pruned) const {
  std::vector<SlotSpec> kept;
  kept.reserve(slots_.size());
  for (const auto& s : slots_) {
    if (s.precursor != pruned) kept.push_back(s);
  }
  if (kept.size() == slots_.size()) {
    throw ValidationError("prompt template: cannot drop " + pruned.str() +
                          "; it has no slot");
  }
  return PromptTemplate(prefix_, std::move(kept), suffix_);
}

namespace {

void append(TokenSeq& out, const TokenSeq& part) {
  out.insert(out.end(), part.begin(), part.end());
}

}  // namespace

AssembledPrompt assemble(const PromptTemplate& tmpl,
                         const std::map<AgentId, TokenSeq>& outputs) {
  AssembledPrompt ap;
  auto mark = [&ap](SegmentRange::Kind kind, int slot, std::size_t begin) {
    if (ap.tokens.size() > begin) {
      ap.segments.push_back(SegmentRange{kind, slot, begin, ap.tokens.size()});
    }
  };

  std::size_t at = 0;
  append(ap.tokens, tmpl.prefix());
  mark(SegmentRange::Kind::Prefix, -1, at);

  for (std::size_t i = 0; i < tmpl.slots().size(); ++i) {
    const auto& slot = tmpl.slots()[i];
    auto it = outputs.find(slot.precursor);
    if (it == outputs.end()) {
      throw ValidationError("assemble: missing output for precursor " + slot.precursor.str());
    }
    at = ap.tokens.size();
    append(ap.tokens, slot.separator);
    mark(SegmentRange::Kind::Separator, static_cast<int>(i), at);
    at = ap.tokens.size();
    append(ap.tokens, it->second);
    mark(SegmentRange::Kind::Slot, static_cast<int>(i), at);
  }

  at = ap.tokens.size();
  append(ap.tokens, tmpl.suffix());
  mark(SegmentRange::Kind::Suffix, -1, at);
  return ap;
}

std::vector<SegmentDescriptor> segment(const PromptTemplate& tmpl) {
  std::vector<SegmentDescriptor> out;
  if (tmpl.slots().empty()) {
    // Nothing blocks: the whole prompt is one free piece.
    SegmentDescriptor d;
    d.kind = SegmentRange::Kind::Prefix;
    d.literal = tmpl.prefix();
    append(d.literal, tmpl.suffix());
    out.push_back(std::move(d));
    return out;
  }

  SegmentDescriptor prefix;
  prefix.kind = SegmentRange::Kind::Prefix;
  prefix.literal = tmpl.prefix();
  out.push_back(std::move(prefix));

  for (std::size_t i = 0; i < tmpl.slots().size(); ++i) {
    const auto& slot = tmpl.slots()[i];
    if (!slot.separator.empty()) {
      SegmentDescriptor sep;
      sep.kind = SegmentRange::Kind::Separator;
      sep.slot_index = static_cast<int>(i);
      sep.literal = slot.separator;
      out.push_back(std::move(sep));
    }
    SegmentDescriptor d;
    d.kind = SegmentRange::Kind::Slot;
    d.slot_index = static_cast<int>(i);
    d.blocking = slot.precursor;
    out.push_back(std::move(d));
  }

  SegmentDescriptor suffix;
  suffix.kind = SegmentRange::Kind::Suffix;
  suffix.literal = tmpl.suffix();
  out.push_back(std::move(suffix));
  return out;
}

}  // namespace moaserve
