#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hskd {

// ---------------------------------------------------------------------------
// Error taxonomy. ContractError covers precondition/shape/input violations
// (CLI exit code 2), IoError covers filesystem failures (exit code 3).
// ---------------------------------------------------------------------------

class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

class NotFoundError : public ContractError {
 public:
  explicit NotFoundError(const std::string& msg) : ContractError(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public IoError {
 public:
  explicit FormatError(const std::string& msg) : IoError(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

// ---------------------------------------------------------------------------
// Integer rounding, half away from zero, for non-negative operands.
// round(a/b) computed without ever leaving integer arithmetic.
// ---------------------------------------------------------------------------
inline int round_div(int64_t num, int64_t den) {
  if (den <= 0) throw ContractError("round_div: denominator must be positive");
  if (num < 0) throw ContractError("round_div: numerator must be non-negative");
  return static_cast<int>((2 * num + den) / (2 * den));
}

// ---------------------------------------------------------------------------
// Seeded RNG with implementation-pinned distributions so that identical seeds
// give identical streams on every platform (std:: distributions are not
// portable across standard libraries).
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double canonical() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) throw ContractError("Rng::below: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - canonical();  // (0, 1]
    const double u2 = canonical();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal(0, sigma) resampled until within two standard deviations.
  double truncated_normal(double sigma) {
    double z;
    do {
      z = normal();
    } while (std::fabs(z) > 2.0);
    return z * sigma;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from [0, n), in sampling order.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw ContractError("sample_without_replacement: k out of range");
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    std::vector<int> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      const size_t j = static_cast<size_t>(below(static_cast<uint64_t>(n - i)));
      out.push_back(pool[j]);
      pool[j] = pool[static_cast<size_t>(n - i - 1)];
    }
    return out;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Mix a stream tag into a seed so sub-generators are independent.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// FNV-1a, used for config digests in binary headers.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace hskd
