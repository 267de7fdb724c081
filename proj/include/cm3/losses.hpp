#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cm3/errors.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

enum class LossKind { Standard, Calibrated };

inline std::string to_string(LossKind k) {
  return k == LossKind::Standard ? "standard" : "calibrated";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "standard") return LossKind::Standard;
  if (s == "calibrated") return LossKind::Calibrated;
  throw ConfigError("unknown loss kind '" + s + "'");
}

enum class PhiCache { Step, Epoch };

struct LossConfig {
  double t = 1.0;      // temperature
  double gamma = 1.0;  // trade-off between alignment and uniformity
  int batch_size = 2048;
  LossKind kind = LossKind::Calibrated;
  PhiCache phi_cache = PhiCache::Step;

  void validate() const {
    if (!(t > 0.0)) throw ConfigError("LossConfig: temperature must be > 0");
    if (gamma < 0.0) throw ConfigError("LossConfig: gamma must be >= 0");
    if (batch_size < 2) throw ConfigError("LossConfig: batch size must be >= 2");
  }
};

/// Clamped similarity of two unit vectors; always gradient-detached (the
/// callers compute it outside any tape).
template <typename S>
double similarity(const Eigen::Ref<const Eigen::RowVector<S, Eigen::Dynamic>>& a,
                  const Eigen::Ref<const Eigen::RowVector<S, Eigen::Dynamic>>& b) {
  return std::clamp(static_cast<double>(a.dot(b)), 0.0, 1.0);
}

/// Pairwise clamped similarities of unit-row fused features. Symmetric,
/// entries in [0, 1], ones on the diagonal for unit rows.
template <typename S>
MatD similarity_matrix(const Mat<S>& fused) {
  const Mat<S> g = fused * fused.transpose();
  return g.template cast<double>().unaryExpr(
      [](double v) { return std::clamp(v, 0.0, 1.0); });
}

/// Per-pair exponential arguments of the two uniformity variants.
inline double uniform_pair_exponent(double sqdist, double t) { return -t * sqdist; }

inline double cal_uniform_pair_exponent(double sqdist, double phi, double t) {
  return -t * (sqdist - 2.0 + 2.0 * phi);
}

/// Mean squared distance over row-paired positives.
template <typename S>
double align_loss(const Mat<S>& user_rows, const Mat<S>& item_rows) {
  if (user_rows.rows() == 0) throw InvalidInputError("align_loss: empty batch");
  if (user_rows.rows() != item_rows.rows() || user_rows.cols() != item_rows.cols()) {
    throw ConfigError("align_loss: shape mismatch");
  }
  double acc = 0.0;
  for (Index i = 0; i < user_rows.rows(); ++i) {
    acc += static_cast<double>((user_rows.row(i) - item_rows.row(i)).squaredNorm());
  }
  return acc / static_cast<double>(user_rows.rows());
}

/// log E exp(-t ||v_a - v_b||^2) over unordered distinct in-batch pairs.
template <typename S>
double uniform_loss(const Mat<S>& vectors, double t) {
  const Index n = vectors.rows();
  if (n < 2) throw InvalidInputError("uniform_loss: need at least 2 vectors");
  std::vector<double> expo;
  expo.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double d2 = static_cast<double>((vectors.row(i) - vectors.row(j)).squaredNorm());
      expo.push_back(uniform_pair_exponent(d2, t));
    }
  }
  return log_mean_exp(std::span<const double>(expo));
}

/// Calibrated item uniformity: each pair's exponent is shifted by
/// 2*phi - 2, so repulsion grows by e^{2t(1-phi)} relative to the standard
/// loss. phi is a precomputed constant and carries no gradient.
template <typename S>
double cal_uniform_loss(const Mat<S>& vectors, const MatD& phi, double t) {
  const Index n = vectors.rows();
  if (n < 2) throw InvalidInputError("cal_uniform_loss: need at least 2 vectors");
  if (phi.rows() != n || phi.cols() != n) {
    throw ConfigError("cal_uniform_loss: phi shape mismatch");
  }
  std::vector<double> expo;
  expo.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double d2 = static_cast<double>((vectors.row(i) - vectors.row(j)).squaredNorm());
      expo.push_back(cal_uniform_pair_exponent(d2, phi(i, j), t));
    }
  }
  return log_mean_exp(std::span<const double>(expo));
}

/// Total objective: align + gamma * (user uniformity + item uniformity).
inline double total_loss(double align, double user_uniform, double item_cal_uniform,
                         double gamma) {
  if (!std::isfinite(align) || !std::isfinite(user_uniform) ||
      !std::isfinite(item_cal_uniform)) {
    throw NumericError("total_loss: non-finite loss component");
  }
  return align + gamma * (user_uniform + item_cal_uniform);
}

}  // namespace cm3
