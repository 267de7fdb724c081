#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cm3/errors.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

/// Two-layer projector shape: x (n x input) -> leaky_relu(x W1 + b1) W2,
/// followed by row normalization onto the hypersphere.
struct ProjectorConfig {
  Index input_dim = 0;
  Index hidden_dim = 256;
  Index output_dim = 64;
  double leaky_slope = 0.01;

  void validate() const {
    if (input_dim <= 0 || hidden_dim <= 0 || output_dim <= 0) {
      throw ConfigError("ProjectorConfig: dimensions must be positive");
    }
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) {
      throw ConfigError("ProjectorConfig: leaky slope must be in (0, 1)");
    }
  }
};

enum class LambdaPolicy { SamplePerStep, Fixed };

struct FusionConfig {
  double alpha = 1.0;            // Beta(alpha, alpha) for the mix coefficient
  LambdaPolicy lambda_policy = LambdaPolicy::SamplePerStep;
  double fixed_lambda = 0.5;
  double singular_tol = 1e-4;    // radians

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("FusionConfig: alpha must be > 0");
    if (fixed_lambda < 0.0 || fixed_lambda > 1.0) {
      throw ConfigError("FusionConfig: fixed lambda must lie in [0, 1]");
    }
    if (!(singular_tol > 0.0)) throw ConfigError("FusionConfig: singular_tol must be > 0");
  }
};

/// Resolves the mix coefficient for one step under the configured policy.
inline double sample_lambda(const FusionConfig& cfg, Rng& rng) {
  return cfg.lambda_policy == LambdaPolicy::Fixed ? cfg.fixed_lambda
                                                  : beta_sample(rng, cfg.alpha);
}

template <typename S>
Mat<S> leaky_relu(const Mat<S>& x, S slope) {
  return x.unaryExpr([slope](S e) { return e > S(0) ? e : slope * e; });
}

/// Projects one modality's raw features to the shared latent space and
/// normalizes rows onto the hypersphere. Zero rows stay zero.
template <typename S>
Mat<S> project_modality(const Mat<S>& x, const Mat<S>& w1, const Mat<S>& b1,
                        const Mat<S>& w2, S slope, S eps = S(1e-12)) {
  if (x.cols() != w1.rows() || w1.cols() != w2.rows() || b1.rows() != 1 ||
      b1.cols() != w1.cols()) {
    throw ConfigError("project_modality: weight shapes inconsistent with input");
  }
  Mat<S> h = x * w1;
  h.rowwise() += b1.row(0);
  h = leaky_relu(h, slope);
  return l2_normalize_rows(Mat<S>(h * w2), eps);
}

namespace detail {

template <typename S>
void check_unit(const Eigen::Ref<const Eigen::RowVector<S, Eigen::Dynamic>>& v,
                const char* what) {
  if (std::abs(v.norm() - S(1)) > S(1e-5)) {
    throw InvalidInputError(std::string(what) + ": input vector is not unit norm");
  }
}

template <typename S>
Eigen::RowVector<S, Eigen::Dynamic> slerp_row(
    const Eigen::RowVector<S, Eigen::Dynamic>& a,
    const Eigen::RowVector<S, Eigen::Dynamic>& b, S lambda, S tol) {
  const S c = std::clamp(a.dot(b), S(-1), S(1));
  const S theta = std::acos(c);
  const S pi = static_cast<S>(M_PI);
  if (theta < tol || theta > pi - tol) {
    // sin(theta) denominator degenerates; renormalized linear fallback
    Eigen::RowVector<S, Eigen::Dynamic> m = lambda * a + (S(1) - lambda) * b;
    const S n = m.norm();
    if (n <= S(1e-12)) return Eigen::RowVector<S, Eigen::Dynamic>::Zero(a.cols());
    return m / n;
  }
  const S s = std::sin(theta);
  Eigen::RowVector<S, Eigen::Dynamic> r =
      (std::sin(lambda * theta) * a + std::sin((S(1) - lambda) * theta) * b) / s;
  // the exact result is unit; renormalizing stops roundoff near the
  // singular bands from compounding across chained calls
  const S n = r.norm();
  if (n <= S(1e-12)) return Eigen::RowVector<S, Eigen::Dynamic>::Zero(a.cols());
  return r / n;
}

}  // namespace detail

/// Spherical interpolation between two unit vectors; lambda = 1 returns a,
/// lambda = 0 returns b. Inputs more than 1e-5 off the sphere are rejected.
template <typename S>
Vec<S> slerp(const Vec<S>& a, const Vec<S>& b, S lambda, S singular_tol = S(1e-4)) {
  if (a.size() != b.size()) throw ConfigError("slerp: dimension mismatch");
  detail::check_unit<S>(a.transpose(), "slerp");
  detail::check_unit<S>(b.transpose(), "slerp");
  return detail::slerp_row<S>(a.transpose(), b.transpose(), lambda, singular_tol)
      .transpose();
}

/// Row-wise slerp at matrix view; rows are assumed unit (the projector
/// output guarantees it).
template <typename S>
Mat<S> slerp_rows(const Mat<S>& a, const Mat<S>& b, S lambda, S singular_tol = S(1e-4)) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("slerp_rows: shape mismatch");
  }
  Mat<S> out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    out.row(i) = detail::slerp_row<S>(a.row(i), b.row(i), lambda, singular_tol);
  }
  return out;
}

template <typename S>
Mat<S> lerp_rows(const Mat<S>& a, const Mat<S>& b, S lambda) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("lerp_rows: shape mismatch");
  }
  return lambda * a + (S(1) - lambda) * b;
}

/// De Casteljau chain over an ordered modality list: the innermost call
/// mixes modalities 1 and 0, then each further modality folds in from the
/// left. A single modality comes back unchanged. One lambda is shared by
/// the whole chain.
template <typename S>
Vec<S> fuse(const std::vector<Vec<S>>& modal_vectors, const FusionConfig& cfg, Rng& rng) {
  if (modal_vectors.empty()) throw InvalidInputError("fuse: empty modality list");
  cfg.validate();
  const S lambda = static_cast<S>(sample_lambda(cfg, rng));
  Vec<S> acc = modal_vectors[0];
  detail::check_unit<S>(acc.transpose(), "fuse");
  for (std::size_t m = 1; m < modal_vectors.size(); ++m) {
    detail::check_unit<S>(modal_vectors[m].transpose(), "fuse");
    acc = slerp(modal_vectors[m], acc, lambda, static_cast<S>(cfg.singular_tol));
  }
  return acc;
}

/// Matrix view of the fuse chain with an explicit lambda.
template <typename S>
Mat<S> fuse_rows(const std::vector<const Mat<S>*>& modality_mats, S lambda,
                 S singular_tol = S(1e-4)) {
  if (modality_mats.empty()) throw InvalidInputError("fuse_rows: empty modality list");
  Mat<S> acc = *modality_mats[0];
  for (std::size_t m = 1; m < modality_mats.size(); ++m) {
    acc = slerp_rows(*modality_mats[m], acc, lambda, singular_tol);
  }
  return acc;
}

/// Linear-interpolation counterpart of the fuse chain (ablation variant);
/// the result is not renormalized.
template <typename S>
Mat<S> fuse_rows_linear(const std::vector<const Mat<S>*>& modality_mats, S lambda) {
  if (modality_mats.empty()) throw InvalidInputError("fuse_rows_linear: empty modality list");
  Mat<S> acc = *modality_mats[0];
  for (std::size_t m = 1; m < modality_mats.size(); ++m) {
    acc = lerp_rows(*modality_mats[m], acc, lambda);
  }
  return acc;
}

}  // namespace cm3
