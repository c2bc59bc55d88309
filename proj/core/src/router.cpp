#include "moaserve/router.hpp"

#include <algorithm>

#include "moaserve/errors.hpp"

namespace moaserve {

SlotPlan::SlotPlan(AgentId self, PromptTemplate tmpl, bool incremental)
    : self_(self), tmpl_(std::move(tmpl)), incremental_(incremental) {
  slots_.reserve(tmpl_.slots().size());
  for (const auto& spec : tmpl_.slots()) {
    SlotState s;
    s.spec = spec;
    slots_.push_back(std::move(s));
  }
  had_slots_ = !slots_.empty();
}

const TokenSeq& SlotPlan::final_prompt() const {
  if (!generate_issued_) throw RunError("router: final prompt requested before generate");
  return final_prompt_;
}

std::map<AgentId, TokenSeq> SlotPlan::outputs() const {
  std::map<AgentId, TokenSeq> out;
  for (const auto& s : slots_) out[s.spec.precursor] = s.received;
  return out;
}

int SlotPlan::slot_index(const AgentId& producer) const {
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].spec.precursor == producer) return static_cast<int>(i);
  }
  return -1;
}

std::vector<RouteAction> SlotPlan::start() {
  if (started_) throw RunError("router: started twice for agent " + self_.str());
  started_ = true;
  return advance();
}

std::vector<RouteAction> SlotPlan::on_chunk(const AgentId& producer, const TokenSeq& tokens) {
  int i = slot_index(producer);
  if (i < 0) return {};  // pruned slot; late chunks are dropped
  if (generate_issued_) {
    throw RunError("router: chunk from " + producer.str() + " after generate for " + self_.str());
  }
  auto& s = slots_[static_cast<std::size_t>(i)];
  if (s.closed) throw RunError("router: chunk after stream close from " + producer.str());
  s.received.insert(s.received.end(), tokens.begin(), tokens.end());
  if (!started_) return {};
  return advance();
}

std::vector<RouteAction> SlotPlan::on_precursor_done(const AgentId& producer) {
  int i = slot_index(producer);
  if (i < 0) return {};
  auto& s = slots_[static_cast<std::size_t>(i)];
  s.closed = true;
  if (!started_) return {};
  return advance();
}

std::vector<RouteAction> SlotPlan::on_precursor_cancelled(const AgentId& producer) {
  int i = slot_index(producer);
  if (i < 0) return {};
  if (generate_issued_) {
    throw RunError("router: precursor " + producer.str() + " pruned after generate for " +
                   self_.str());
  }
  if (i < active_) {
    throw RunError("router: completed precursor " + producer.str() + " cannot be pruned");
  }

  std::vector<RouteAction> actions;
  if (i == active_) {
    const auto& s = slots_[static_cast<std::size_t>(i)];
    if (s.sep_issued && scheduled_ > s.mark) {
      // Roll the engine back to where this slot began.
      RouteAction rc;
      rc.kind = RouteAction::Kind::Reclaim;
      rc.start = s.mark;
      actions.push_back(std::move(rc));
      reclaims_ += 1;
      scheduled_ = s.mark;
      issued_stream_.resize(static_cast<std::size_t>(s.mark));
    } else if (s.sep_issued) {
      // Slot was activated but nothing reached the engine yet.
    }
  }
  tmpl_ = tmpl_.without(producer);
  slots_.erase(slots_.begin() + i);
  if (!started_) return actions;
  auto more = advance();
  actions.insert(actions.end(), more.begin(), more.end());
  return actions;
}

void SlotPlan::flush(std::vector<RouteAction>& out) {
  if (pending_.empty()) return;
  RouteAction a;
  a.kind = RouteAction::Kind::PrefillOnly;
  a.start = scheduled_;
  a.tokens = std::move(pending_);
  pending_.clear();
  scheduled_ += static_cast<int>(a.tokens.size());
  issued_stream_.insert(issued_stream_.end(), a.tokens.begin(), a.tokens.end());
  calls_ += 1;
  out.push_back(std::move(a));
}

std::vector<RouteAction> SlotPlan::advance() {
  std::vector<RouteAction> actions;
  if (generate_issued_) return actions;

  if (!incremental_) {
    // Accumulate-then-generate: one call once every producer has finished.
    for (const auto& s : slots_) {
      if (!s.closed) return actions;
    }
    auto assembled = assemble(tmpl_, outputs());
    final_prompt_ = std::move(assembled.tokens);
    RouteAction g;
    g.kind = RouteAction::Kind::Generate;
    g.start = 0;
    g.tokens = final_prompt_;
    actions.push_back(std::move(g));
    generate_issued_ = true;
    return actions;
  }

  if (scheduled_ == 0 && pending_.empty() && active_ == 0) {
    pending_.insert(pending_.end(), tmpl_.prefix().begin(), tmpl_.prefix().end());
  }

  bool progressed = true;
  while (progressed) {
    progressed = false;
    if (active_ < static_cast<int>(slots_.size())) {
      auto& s = slots_[static_cast<std::size_t>(active_)];
      if (!s.sep_issued) {
        s.mark = scheduled_ + static_cast<int>(pending_.size());
        pending_.insert(pending_.end(), s.spec.separator.begin(), s.spec.separator.end());
        s.sep_issued = true;
        s.phase = SlotPhase::Filling;
      }
      if (s.issued < static_cast<int>(s.received.size())) {
        pending_.insert(pending_.end(), s.received.begin() + s.issued, s.received.end());
        s.issued = static_cast<int>(s.received.size());
      }
      if (s.closed && s.issued == static_cast<int>(s.received.size())) {
        s.phase = SlotPhase::Complete;
        active_ += 1;
        progressed = true;
      }
    }
  }

  if (active_ == static_cast<int>(slots_.size())) {
    if (!suffix_issued_) {
      pending_.insert(pending_.end(), tmpl_.suffix().begin(), tmpl_.suffix().end());
      suffix_issued_ = true;
    }
    flush(actions);
    // Prompt complete; hand over to generate with everything prefilled.
    auto assembled = assemble(tmpl_, outputs());
    if (assembled.tokens != issued_stream_) {
      throw RunError("router: issued prompt diverged from template assembly for " + self_.str());
    }
    final_prompt_ = std::move(assembled.tokens);
    RouteAction g;
    g.kind = RouteAction::Kind::Generate;
    g.start = 0;
    g.tokens = final_prompt_;
    actions.push_back(std::move(g));
    generate_issued_ = true;
    return actions;
  }

  flush(actions);
  return actions;
}

}  // namespace moaserve
