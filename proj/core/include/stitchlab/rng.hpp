#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace stitchlab {

/// splitmix64 finalizer. Used to expand seeds and to derive sub-seeds.
std::uint64_t splitmix64(std::uint64_t& state);

/// Mixes a parent seed with a stream tag into an independent child seed.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag);

/// xoshiro256** seeded through splitmix64.
///
/// Every draw is computed from integer state with portable arithmetic, so a
/// given seed produces the same sequence on every platform. Gaussian draws use
/// Box-Muller rather than std::normal_distribution, whose output is
/// implementation defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Fisher-Yates, driven by below().
  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stitchlab
