#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace cdr {

/// SplitMix64 step. Used for seeding and for deriving independent streams.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derives a child seed from a master seed and a stream name. Stable across
/// platforms: FNV-1a over the name bytes, mixed with the master through
/// SplitMix64.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);
std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t index);

/// xoshiro256** generator seeded through SplitMix64.
///
/// Every stochastic operation in the library draws from one of these, so a
/// run is bit-reproducible given its seeds. Derived distributions:
///   uniform()  53-bit mantissa in [0, 1)
///   below(n)   Lemire's multiply-shift with rejection, unbiased in [0, n)
///   coin()     top bit of next()
///   normal()   Box-Muller (polar-free form), second variate cached
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  double uniform();
  std::uint64_t below(std::uint64_t n);
  bool coin();
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    // Fisher-Yates, last index first.
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace cdr
