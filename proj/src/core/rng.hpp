// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include <random>

namespace pqat {

// Derives an independent substream seed from (seed, stream). splitmix64 over
// the combined words; stable across platforms.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// All random draws go through this wrapper. mt19937_64 output is fully
// specified by the standard; the std:: distributions are not, so doubles are
// derived from raw engine words here to keep runs bit-reproducible.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on [0,1) with 53-bit resolution.
  double uniform01();

  // Uniform on [lo, hi).
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller; the spare draw is cached.
  double normal();

  // Uniform index in [0, n); n must be positive.
  std::size_t index(std::size_t n);

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pqat
