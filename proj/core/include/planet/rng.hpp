#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>

namespace planet {

// Counter-based random stream. Every stream is identified by a 64-bit key;
// child streams are derived by mixing a label into the key, so the draw
// sequence of one stream never depends on how often sibling streams were
// used. This is what makes training runs reproducible from a single root
// seed regardless of call order.
class RngStream {
 public:
  explicit RngStream(uint64_t key) : key_(mix_(key ^ kGolden)) {}

  RngStream child(uint64_t id) const {
    return RngStream(mix_(key_ + mix_(id ^ 0x9e3779b97f4a7c15ull)));
  }
  RngStream child(std::string_view label) const {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : label) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return child(h);
  }

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull) + key_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1): 53-bit mantissa construction.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n) via rejection.
  uint64_t uniform_int(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; second value cached on the stream.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void fill_normal(std::span<T> out) {
    for (auto& x : out) x = static_cast<T>(normal());
  }
  template <class T>
  void fill_uniform(std::span<T> out, double lo, double hi) {
    for (auto& x : out) x = static_cast<T>(uniform(lo, hi));
  }

 private:
  static constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;

  static uint64_t mix_(uint64_t z) {
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdull;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ull;
    return z ^ (z >> 33);
  }

  uint64_t key_ = 0;
  uint64_t state_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace planet
