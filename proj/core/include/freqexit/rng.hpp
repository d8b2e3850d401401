#pragma once

#include <cstdint>
#include <string_view>

namespace freqexit {

/// SplitMix64 step: z = (s += 0x9E3779B97F4A7C15);
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
/// return z ^ (z >> 31).
std::uint64_t splitmix64(std::uint64_t& state);

/// xoshiro256** (Blackman & Vigna). State is seeded by four SplitMix64 draws
/// from the user seed; output is rotl(s1 * 5, 7) * 9. Doubles take the top 53
/// bits scaled by 2^-53, so every stream is bit-identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) by rejection (unbiased).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one value per call, second one discarded).
  double normal();

 private:
  std::uint64_t s_[4];
};

/// Derives an independent stage seed from a root seed and a fixed label:
/// splitmix64 of (root XOR fnv1a64(label)).
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

}  // namespace freqexit
