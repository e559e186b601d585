#pragma once

#include <cstdint>
#include <initializer_list>

namespace adaptrl {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Mixes a base seed with stream identifiers so independent consumers (roles,
/// environment lanes, epochs) draw from unrelated sequences.
inline constexpr std::uint64_t derive_seed(
    std::uint64_t seed, std::initializer_list<std::uint64_t> streams) noexcept {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t s : streams) h = splitmix64(h ^ splitmix64(s + 0x632BE59BD9B4E019ULL));
  return h;
}

/// Small counter-based generator. Output depends only on (seed, draw index), so
/// the whole state is one integer and is trivially copyable into environment
/// state or checkpoints.
class Rng {
 public:
  constexpr explicit Rng(std::uint64_t seed = 0) noexcept : key_(splitmix64(seed)) {}

  constexpr std::uint64_t next_u64() noexcept {
    return splitmix64(key_ ^ splitmix64(counter_++));
  }

  /// Uniform in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  constexpr double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, n). n must be positive.
  constexpr std::uint64_t below(std::uint64_t n) noexcept {
    // rejection sampling keeps the result unbiased
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  constexpr int sign() noexcept { return (next_u64() & 1U) ? 1 : -1; }

  constexpr std::uint64_t counter() const noexcept { return counter_; }

  friend constexpr bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace adaptrl
