#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace moaserve {

namespace detail {

// splitmix64 finalizer; full-period, well-mixed, and identical on every
// platform, which is what byte-stable traces require.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Maps a 64-bit word to a double in [0, 1) with 53 bits of precision.
inline double unit_from_bits(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Combines hash words so stateless per-index draws can be derived from
// (seed, label, index) without consuming stream state.
inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return detail::mix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// Deterministic pseudo-random stream (splitmix64). Every stream used in a
// run is derived from (master seed, label), so draws never depend on the
// order in which unrelated components happen to ask for randomness.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  static RngStream derive(std::uint64_t master, std::string_view label) {
    return RngStream(hash_combine(master, detail::fnv1a(label)));
  }

  RngStream derive(std::string_view label) const {
    return RngStream::derive(state_, label);
  }

  std::uint64_t next_u64() { return detail::mix64(state_++); }

  // Uniform in [0, 1).
  double next_uniform() { return unit_from_bits(next_u64()); }

  // Box-Muller; draws two uniforms per call so the stream advances by a
  // fixed amount regardless of caller behaviour.
  double next_gaussian(double mu, double sigma) {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t next_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) return lo;
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Stateless hashed draws: identical results no matter when or how often the
// surrounding code evaluates them.
inline std::uint64_t hash_u64(std::uint64_t seed, std::string_view label, std::uint64_t index) {
  return detail::mix64(hash_combine(hash_combine(seed, detail::fnv1a(label)), index));
}

inline double hash_unit(std::uint64_t seed, std::string_view label, std::uint64_t index) {
  return unit_from_bits(hash_u64(seed, label, index));
}

inline double hash_gaussian(std::uint64_t seed, std::string_view label, std::uint64_t index,
                            double mu, double sigma) {
  std::uint64_t a = hash_u64(seed, label, 2 * index);
  std::uint64_t b = hash_u64(seed, label, 2 * index + 1);
  double u1 = static_cast<double>((a >> 11) + 1) * 0x1.0p-53;
  double u2 = unit_from_bits(b);
  return mu + sigma * std::sqrt(-2.0 * std::log(u1)) *
                  std::cos(6.283185307179586476925286766559 * u2);
}

}  // namespace moaserve
