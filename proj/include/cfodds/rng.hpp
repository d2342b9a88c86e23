#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "cfodds/errors.hpp"

namespace cfodds {

// splitmix64 finalizer; spreads structured seed material across all 64 bits.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from (master seed, stage tag, index).
// Every consumer of randomness gets its own tagged stream; streams are never
// shared across stages, so inserting a new draw in one stage cannot perturb
// another.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the tag bytes
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return mix64(master ^ mix64(h) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

// Deterministic random source. mt19937_64 output is fully specified by the
// standard; the distribution transforms are implemented here by hand because
// the std:: distribution objects are implementation defined and would break
// bit reproducibility across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform on (0, 1]; used where log(u) must stay finite.
  double uniform_pos() {
    return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller. The sine partner is discarded so each
  // draw consumes exactly two engine words.
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Unbiased integer on [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw ConfigError("Rng::below requires bound > 0");
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = engine_();
      if (r >= threshold) return r % bound;
    }
  }

  // Index draw by CDF inversion. Probabilities must be nonnegative; they are
  // normalized by their sum. Accumulated rounding falls through to the last
  // index with nonzero mass.
  int categorical(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw ConfigError("categorical probabilities must be >= 0");
      total += p;
    }
    if (!(total > 0.0)) throw ConfigError("categorical probabilities sum to zero");
    const double u = uniform() * total;
    double acc = 0.0;
    int last = 0;
    for (int k = 0; k < static_cast<int>(probs.size()); ++k) {
      if (probs[k] <= 0.0) continue;
      acc += probs[k];
      last = k;
      if (u < acc) return k;
    }
    return last;
  }

  // Fisher-Yates; identical order on every platform.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cfodds
