#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace fesnet {

/// xoshiro256** generator seeded through splitmix64. Draws are defined
/// entirely by integer arithmetic, so a seed yields the same sequence on
/// every platform. Floating-point helpers below only use exact conversions
/// plus log/cos/sin for normals.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "xoshiro256**/splitmix64";

  explicit Rng(std::uint64_t seed = 0);

  /// Stream derived from a base seed and a tuple of labels. Used to give
  /// each (sample, epoch) its own independent sequence.
  static Rng derive(std::uint64_t seed, std::string_view label,
                    std::uint64_t a = 0, std::uint64_t b = 0);

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t hash_label(std::string_view label);

}  // namespace fesnet
