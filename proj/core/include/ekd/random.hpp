#pragma once

#include <cstdint>
#include <string_view>

namespace ekd {

/// One step of the splitmix64 mixer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stable sub-seed for a named purpose ("teacher", "shuffle", ...).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

/// Counter-based stream: the k-th draw depends only on (key, k).
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t key) : key_(splitmix64(key)) {}
  constexpr CounterRng(std::uint64_t a, std::uint64_t b, std::uint64_t c)
      : key_(splitmix64(splitmix64(splitmix64(a) ^ b) ^ c)) {}

  constexpr std::uint64_t next() { return splitmix64(key_ + 0x632be59bd9b4e019ULL * ++counter_); }
  /// Uniform in [0, 1).
  constexpr double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  /// Uniform integer in [0, n); n must be positive.
  constexpr std::uint64_t below(std::uint64_t n) { return next() % n; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace ekd
