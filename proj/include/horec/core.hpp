#pragma once

// Shared plumbing: error type, deterministic RNG, byte hashing.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace horec {

class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

[[noreturn]] inline void fail(const std::string& category, const std::string& msg) {
  throw Error(category, msg);
}

inline void require(bool cond, const std::string& category, const std::string& msg) {
  if (!cond) fail(category, msg);
}

// FNV-1a over raw bytes; used for seed derivation and config fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 1469598103934665603ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Shortest decimal form that round-trips; locale-independent, so logs and
// reports are byte-stable across runs.
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  require(res.ec == std::errc(), "format", "format_double: buffer too small");
  return std::string(buf, res.ptr);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Stream names a purpose ("placement", "lighting", ...) so adding a consumer
// does not shift the draws seen by existing ones.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& stream,
                                 std::uint64_t index = 0) {
  std::uint64_t h = fnv1a64(&base, sizeof(base));
  h = fnv1a64(stream, h);
  h = fnv1a64(&index, sizeof(index), h);
  return h;
}

// mt19937_64 with explicit bit-to-double mapping so sequences are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, first member of the pair only; one extra draw buys a
  // stateless call sequence.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) fail("invalid-argument", "Rng::below(0)");
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                          std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace horec
