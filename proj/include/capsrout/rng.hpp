#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace capsrout {

// Seeded 64-bit Mersenne Twister (std::mt19937_64). The engine's output
// sequence is fixed by the standard; the distribution transforms below are
// written out here because the std:: distributions are implementation-defined
// and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one draw per call, the second variate is discarded.
  double normal(double mean = 0.0, double stddev = 1.0);

  // Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::string state() const;
  void restore(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace capsrout
