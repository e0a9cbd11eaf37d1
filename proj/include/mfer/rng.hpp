#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace mfer {

/// Named substreams of the single run seed. Every randomized stage draws from
/// its own stream so partial reruns stay reproducible.
enum class Substream : std::uint64_t {
  init = 1,
  shuffle = 2,
  augment = 3,
  dropout = 4,
  split = 5,
  synth = 6,
};

/// Seeded pseudo-random source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The distributions are implemented here because the standard
/// library ones are implementation-defined, and corpora/checkpoints must be
/// identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream derived from (seed, substream, id).
  static Rng stream(std::uint64_t seed, Substream sub, std::uint64_t id = 0);

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer, used to derive stream seeds.
std::uint64_t mix64(std::uint64_t x);

}  // namespace mfer
