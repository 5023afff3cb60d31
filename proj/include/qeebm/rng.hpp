#pragma once

// Counter-based random streams. A stream is addressed by (seed, purpose, index); its n-th draw
// is a pure function of that address and n, so the order in which independent streams are
// consumed (or the worker that consumes them) never changes what they produce.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace qeebm {

std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);
std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
/// Independent seed for a named purpose, e.g. derive_seed(seed, "init:task").
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0);

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on the closed range [lo, hi].
  int uniform_int(int lo, int hi);
  /// Index drawn from unnormalized nonnegative weights.
  std::size_t categorical(std::span<const double> weights);
  double normal();

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i - 1)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace qeebm
