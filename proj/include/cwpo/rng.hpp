#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace cwpo {

// splitmix64 finalizer; used to derive independent stream seeds from
// (base seed, stream id) so per-item streams never depend on visit order.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// mt19937_64 with portable helpers. The std:: distributions are
// implementation-defined, so uniform/normal/integer draws are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double normal();
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  int uniform_int(int lo, int hi_inclusive);

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cwpo
