#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ceg/error.hpp"

namespace ceg {

using Vec = std::vector<double>;

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::Shape, "dot of lengths " + std::to_string(a.size()) + " and " +
                                      std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y = M x + b
inline Vec affine(const Matrix& m, std::span<const double> x, std::span<const double> b) {
  if (x.size() != m.cols || b.size() != m.rows) {
    throw Error(ErrorKind::Shape, "affine map expects input " + std::to_string(m.cols) +
                                      " and bias " + std::to_string(m.rows) + ", got " +
                                      std::to_string(x.size()) + " and " +
                                      std::to_string(b.size()));
  }
  Vec y(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) y[r] = dot(m.row(r), x) + b[r];
  return y;
}

/// Max-shifted softmax.
inline Vec softmax(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorKind::NumericInput, "softmax of empty vector");
  if (!all_finite(logits)) throw Error(ErrorKind::NumericInput, "softmax of non-finite logits");
  const double shift = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - shift);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

inline constexpr double kProbClamp = 1e-12;

/// -sum_h target_h log(pred_h), with pred clamped to [1e-12, 1]. Targets may be soft.
inline double cross_entropy(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw Error(ErrorKind::Shape, "cross-entropy of lengths " + std::to_string(pred.size()) +
                                      " and " + std::to_string(target.size()));
  }
  double loss = 0.0;
  for (std::size_t h = 0; h < pred.size(); ++h) {
    if (target[h] == 0.0) continue;
    loss -= target[h] * std::log(std::clamp(pred[h], kProbClamp, 1.0));
  }
  return loss;
}

inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::DegenerateVector, "cosine distance of zero vector");
  const double cosine = std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
  return 1.0 - cosine;
}

inline Vec one_hot(std::size_t index, std::size_t size) {
  Vec v(size, 0.0);
  v.at(index) = 1.0;
  return v;
}

/// First index of the maximum; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// 17 significant digits; parses back to the identical double.
inline std::string format_double17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// A named random stream. Two streams built from the same (seed, name)
/// produce identical sequences; different names give unrelated engines.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view name)
      : seed_(seed), name_(name), engine_(splitmix64(seed ^ splitmix64(fnv1a64(name)))) {}

  std::uint64_t seed() const { return seed_; }
  const std::string& name() const { return name_; }

  /// Derive an independent child stream, e.g. "train" -> "train/3".
  RngStream child(std::string_view suffix) const { return RngStream(seed_, name_ + "/" + std::string(suffix)); }

  std::mt19937_64& engine() { return engine_; }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double sigma = 1.0) {
    return std::normal_distribution<double>(mean, sigma)(engine_);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }
  double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::uint64_t seed_;
  std::string name_;
  std::mt19937_64 engine_;
};

/// lambda ~ Beta(alpha, alpha) via two Gamma draws.
inline double sample_beta(double alpha, RngStream& rng) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw Error(ErrorKind::Parameter, "Beta parameter must be positive, got " + format_double17(alpha));
  }
  // Small shapes underflow Gamma draws to 0; retry until one side is nonzero.
  for (;;) {
    const double a = rng.gamma(alpha);
    const double b = rng.gamma(alpha);
    if (a + b > 0.0) return std::clamp(a / (a + b), 0.0, 1.0);
  }
}

}  // namespace ceg
