#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace erienet {

/// Deterministic random source. Raw bits come from std::mt19937_64, whose
/// output sequence is fixed by the C++ standard; the real-valued draws below
/// are computed here rather than through <random> distributions, whose
/// algorithms differ between standard libraries. Identical seeds therefore
/// give identical sequences on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream for a named consumer, e.g. one parameter tensor:
  /// seeded with splitmix64(seed ^ fnv1a(name)).
  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) by 128-bit multiply-shift.
  std::uint64_t index(std::uint64_t n);
  /// Standard normal via Box-Muller on two fresh uniforms.
  double normal();

  /// Textual engine state; restoring it resumes the exact sequence.
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace erienet
