#pragma once

// Deterministic RNG used everywhere randomness is needed (init, shuffling,
// dropout, synthetic data). Algorithm, fixed and documented:
//   engine   : std::mt19937_64 (bit-exact across platforms by the standard)
//   uniform  : top 53 bits of the engine output scaled by 2^-53  -> [0,1)
//   normal   : Irwin-Hall sum of 12 uniforms minus 6 (mean 0, variance 1)
//   integers : rejection sampling, no modulo bias
// Only +,-,* on engine outputs, so identical seeds produce identical streams
// across runs and platforms. std::uniform_real_distribution and friends are
// implementation-defined and deliberately not used.

#include <cstdint>
#include <iterator>
#include <random>
#include <string_view>

namespace capskan {

class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "mt19937_64/u53/irwin-hall-12";

  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0,1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Approximately standard normal (Irwin-Hall 12-sum), bounded to (-6,6).
  double normal() {
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += uniform();
    return s - 6.0;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates shuffle.
  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(std::distance(first, last));
    for (std::uint64_t i = n; i > 1; --i) {
      const std::uint64_t j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  // Independent child stream; deterministic in (seed, stream id).
  Rng derive(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1)));
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace capskan
