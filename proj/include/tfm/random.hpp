#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace tfm {

/// Seeded random stream with hierarchical splitting.
///
/// A stream is identified by its path (root seed followed by split indices);
/// the engine is seeded from that path through std::seed_seq, so two streams
/// with the same path produce the same draws on every platform. Variates are
/// derived from raw engine bits here rather than through <random>
/// distributions, whose output is implementation-defined.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : path_{seed} { reseed(); }

  RandomStream(std::uint64_t seed, std::initializer_list<std::uint64_t> indices) : path_{seed} {
    path_.insert(path_.end(), indices.begin(), indices.end());
    reseed();
  }

  /// Independent child stream; does not advance this stream.
  RandomStream split(std::uint64_t index) const {
    RandomStream child = *this;
    child.path_.push_back(index);
    child.reseed();
    return child;
  }

  const std::vector<std::uint64_t>& path() const { return path_; }

  std::uint64_t bits() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n); unbiased by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one variate per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  void reseed() {
    std::vector<std::uint32_t> words;
    words.reserve(path_.size() * 2);
    for (std::uint64_t v : path_) {
      words.push_back(static_cast<std::uint32_t>(v));
      words.push_back(static_cast<std::uint32_t>(v >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  std::vector<std::uint64_t> path_;
  std::mt19937_64 engine_;
};

}  // namespace tfm
