#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "cm3/errors.hpp"

namespace cm3 {

// Dense matrices are row-major throughout: feature files, checkpoints and
// the CSR sparse layout all iterate rows.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Vector<S, Eigen::Dynamic>;
template <typename S>
using SpMat = Eigen::SparseMatrix<S, Eigen::RowMajor>;  // compressed-row storage

using MatF = Mat<float>;
using MatD = Mat<double>;
using Index = Eigen::Index;

/// Deterministic counter-based generator (splitmix64 core). The stream is a
/// pure function of the seed, identical across runs and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform index in [0, n). Rejection sampling, no modulo bias.
  std::size_t index(std::size_t n) {
    if (n == 0) throw InvalidInputError("Rng::index: n must be positive");
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return static_cast<std::size_t>(r % n);
  }

  /// Standard normal, Marsaglia polar method.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return u * f;
  }

  /// Gamma(alpha, 1) via the Marsaglia-Tsang squeeze; alpha < 1 is boosted
  /// through Gamma(alpha + 1).
  double gamma(double alpha) {
    if (!(alpha > 0.0)) throw ConfigError("Rng::gamma: alpha must be > 0");
    if (alpha < 1.0) {
      return gamma(alpha + 1.0) * std::pow(uniform_open(), 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  /// Child stream derived from the current state and a salt. Used to hand
  /// one generator per worker / per epoch without sharing state.
  Rng fork(std::uint64_t salt) const {
    Rng child(state_ ^ (0x632be59bd9b4e019ull * (salt + 1)));
    child.next_u64();
    return child;
  }

 private:
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Beta(alpha, alpha) sample in the open interval (0, 1), from two Gamma
/// draws. alpha = 1 reduces to the uniform distribution.
inline double beta_sample(Rng& rng, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("beta_sample: alpha must be > 0");
  double g1, g2;
  do {
    g1 = rng.gamma(alpha);
    g2 = rng.gamma(alpha);
  } while (g1 + g2 == 0.0);
  const double s = g1 / (g1 + g2);
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  return std::clamp(s, lo, hi);
}

/// Sparse-dense product. Dimension mismatch is a configuration error.
template <typename S>
Mat<S> spmm(const SpMat<S>& a, const Mat<S>& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("spmm: inner dimensions disagree (" +
                      std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()) + ")");
  }
  return a * b;
}

/// Row-wise L2 normalization. Rows with norm <= eps come back as zero rows.
template <typename S>
Mat<S> l2_normalize_rows(const Mat<S>& m, S eps = S(1e-12)) {
  Mat<S> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const S n = m.row(i).norm();
    if (n > eps) {
      out.row(i) = m.row(i) / n;
    } else {
      out.row(i).setZero();
    }
  }
  return out;
}

/// log((1/n) sum exp(v_k)) with max subtraction; accumulates in double.
template <typename S>
double log_mean_exp(std::span<const S> values) {
  if (values.empty()) throw InvalidInputError("log_mean_exp: empty sequence");
  double mx = -std::numeric_limits<double>::infinity();
  for (const S v : values) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (const S v : values) sum += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(sum / static_cast<double>(values.size()));
}

template <typename S>
double log_mean_exp(const std::vector<S>& values) {
  return log_mean_exp(std::span<const S>(values));
}

}  // namespace cm3
