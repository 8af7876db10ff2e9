#pragma once

#include <array>
#include <cstdint>

namespace mvapad {

/// xoshiro256** generator seeded through SplitMix64.
///
/// Every draw is produced with integer arithmetic only, so a given seed yields
/// the same sequence on every platform. `split()` derives an independent child
/// stream by seeding a fresh generator from the parent's next output, which
/// also advances the parent.
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed = 0);

  static Rng from_state(const State& state);
  const State& state() const { return state_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller (uses two uniforms per call).
  double normal();

  Rng split();

 private:
  State state_{};
};

std::uint64_t splitmix64(std::uint64_t& x);

}  // namespace mvapad
