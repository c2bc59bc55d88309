#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moaserve/errors.hpp"
#include "moaserve/rng.hpp"

namespace moaserve {

// Address of one agent: layer (1-based, 1 = proposer layer) and position
// within that layer (0-based).
struct AgentId {
  int layer = 1;
  int position = 0;

  auto operator<=>(const AgentId&) const = default;

  std::string str() const {
    return std::to_string(layer) + ":" + std::to_string(position);
  }

  static AgentId parse(const std::string& s) {
    auto colon = s.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 >= s.size()) {
      throw ValidationError("agent id '" + s + "': expected '<layer>:<position>'");
    }
    try {
      return AgentId{std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
    } catch (const std::exception&) {
      throw ValidationError("agent id '" + s + "': expected '<layer>:<position>'");
    }
  }
};

// Output-length model for an agent; sampled once per query.
struct OutputLenDist {
  enum class Kind { Fixed, Uniform, Empirical };

  Kind kind = Kind::Fixed;
  int fixed = 128;
  int lo = 1;
  int hi = 1;
  std::vector<int> values;  // empirical support, sampled uniformly

  static OutputLenDist fixed_len(int n) {
    OutputLenDist d;
    d.kind = Kind::Fixed;
    d.fixed = n;
    return d;
  }

  static OutputLenDist uniform(int lo, int hi) {
    OutputLenDist d;
    d.kind = Kind::Uniform;
    d.lo = lo;
    d.hi = hi;
    return d;
  }

  static OutputLenDist empirical(std::vector<int> values) {
    OutputLenDist d;
    d.kind = Kind::Empirical;
    d.values = std::move(values);
    return d;
  }

  void validate(const std::string& where) const {
    switch (kind) {
      case Kind::Fixed:
        if (fixed < 0) throw ValidationError(where + ": fixed output length must be >= 0");
        break;
      case Kind::Uniform:
        if (lo < 0 || hi < lo)
          throw ValidationError(where + ": uniform output length needs 0 <= min <= max");
        break;
      case Kind::Empirical:
        if (values.empty())
          throw ValidationError(where + ": empirical output length needs at least one value");
        for (int v : values)
          if (v < 0) throw ValidationError(where + ": empirical output lengths must be >= 0");
        break;
    }
  }

  int sample(RngStream& rng) const {
    switch (kind) {
      case Kind::Fixed:
        return fixed;
      case Kind::Uniform:
        return static_cast<int>(rng.next_int(lo, hi));
      case Kind::Empirical:
        return values[static_cast<std::size_t>(
            rng.next_int(0, static_cast<std::int64_t>(values.size()) - 1))];
    }
    return fixed;
  }

  bool operator==(const OutputLenDist&) const = default;
};

// Serving profile attached to an agent. Rates calibrate the linear latency
// model; the confidence and overlap fields drive the synthetic output model
// used by simulation runs.
struct AgentProfile {
  std::string model_tag = "default";
  double prefill_rate = 4000.0;  // tokens/s
  double decode_rate = 60.0;     // tokens/s
  OutputLenDist output_len = OutputLenDist::fixed_len(128);

  // Per-token logprob ~ min(0, Normal(mu, sigma)); geometric-mean confidence
  // of an output is derived from these.
  double conf_logprob_mu = -0.25;
  double conf_logprob_sigma = 0.10;

  // Fraction of output tokens drawn from a pool shared by the agent's
  // cluster; controls how semantically aligned sibling outputs look.
  double semantic_overlap = 0.85;

  void validate(const std::string& where) const {
    if (!(prefill_rate > 0)) throw ValidationError(where + ": prefill_rate must be > 0");
    if (!(decode_rate > 0)) throw ValidationError(where + ": decode_rate must be > 0");
    if (!(semantic_overlap >= 0.0 && semantic_overlap <= 1.0))
      throw ValidationError(where + ": semantic_overlap must be in [0, 1]");
    if (!(conf_logprob_sigma >= 0.0))
      throw ValidationError(where + ": conf_logprob_sigma must be >= 0");
    output_len.validate(where + ".output_len");
  }

  bool operator==(const AgentProfile&) const = default;
};

}  // namespace moaserve

template <>
struct std::hash<moaserve::AgentId> {
  std::size_t operator()(const moaserve::AgentId& a) const noexcept {
    return std::hash<long long>{}((static_cast<long long>(a.layer) << 32) ^
                                  static_cast<long long>(a.position));
  }
};
