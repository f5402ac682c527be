#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

#include "hp/errors.hpp"

namespace hp {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Named, seeded random stream.
///
/// Draws are produced by std::mt19937_64, whose output sequence is fixed by
/// the standard, and converted to floating point / integers by code in this
/// header rather than by <random> distributions (those are
/// implementation-defined). The result is bit-identical across platforms.
///
/// Streams are single-consumer. Code that fans out work derives child
/// streams with child(), keyed by integers such as an iteration or anchor
/// index, so the draw sequence never depends on scheduling order.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view stream_id)
      : seed_(seed), key_(detail::splitmix64(seed ^ detail::fnv1a(stream_id))), engine_(key_) {}

  std::uint64_t seed() const noexcept { return seed_; }

  RngStream child(std::initializer_list<std::uint64_t> path) const {
    std::uint64_t k = key_;
    for (auto p : path) k = detail::splitmix64(k ^ detail::splitmix64(p + 0x632be59bd9b4e019ULL));
    return RngStream(seed_, k, Raw{});
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased (Lemire rejection).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InputError("RngStream::below: empty range");
    const std::uint64_t limit = (0 - n) % n;
    for (;;) {
      const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
      if (static_cast<std::uint64_t>(m) >= limit) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  /// Standard normal via Box-Muller (one draw per call; the pair is not cached
  /// so the stream position is a simple function of call count).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct values from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw InputError("RngStream: cannot sample more items than available");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

 private:
  struct Raw {};
  RngStream(std::uint64_t seed, std::uint64_t key, Raw) : seed_(seed), key_(key), engine_(key) {}

  std::uint64_t seed_;
  std::uint64_t key_;
  std::mt19937_64 engine_;
};

}  // namespace hp
