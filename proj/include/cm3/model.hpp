#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cm3/autodiff.hpp"
#include "cm3/errors.hpp"
#include "cm3/fusion.hpp"
#include "cm3/graphs.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

enum class FusionMode { Slerp, Linear, None };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Slerp: return "slerp";
    case FusionMode::Linear: return "linear";
    case FusionMode::None: return "none";
  }
  return "?";
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "slerp") return FusionMode::Slerp;
  if (s == "linear") return FusionMode::Linear;
  if (s == "none") return FusionMode::None;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

struct ModelConfig {
  Index d = 64;            // latent width per block
  Index hidden_dim = 256;  // projector hidden width
  std::vector<Index> modality_dims;
  int layers_ui = 2;
  int layers_ii = 1;
  bool normalize_reps = true;  // L2-normalize final reps for loss and scoring
  FusionMode fusion = FusionMode::Slerp;
  double leaky_slope = 0.01;

  int num_modalities() const { return static_cast<int>(modality_dims.size()); }
  // number of concatenated d-wide blocks in the item representation
  int num_blocks() const {
    return num_modalities() + (fusion == FusionMode::None ? 0 : 1);
  }
  Index rep_dim() const { return static_cast<Index>(num_blocks()) * d; }

  void validate() const {
    if (d <= 0) throw ConfigError("ModelConfig: d must be positive");
    if (hidden_dim <= 0) throw ConfigError("ModelConfig: hidden_dim must be positive");
    if (modality_dims.empty()) throw ConfigError("ModelConfig: at least one modality required");
    for (Index dm : modality_dims) {
      if (dm <= 0) throw ConfigError("ModelConfig: modality dims must be positive");
    }
    if (layers_ui < 0 || layers_ii < 0) {
      throw ConfigError("ModelConfig: layer counts must be non-negative");
    }
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) {
      throw ConfigError("ModelConfig: leaky slope must be in (0, 1)");
    }
  }
};

/// All trainable tensors: one two-layer projector per modality, the user
/// table, and the per-user segment weights.
template <typename S>
struct ModelParams {
  struct Projector {
    Param<S> w1, b1, w2;
  };
  std::vector<Projector> projectors;
  Param<S> user_emb;      // |U| x l
  Param<S> pref_weights;  // |U| x num_blocks (W3)

  std::vector<Param<S>*> all() {
    std::vector<Param<S>*> out;
    for (auto& p : projectors) {
      out.push_back(&p.w1);
      out.push_back(&p.b1);
      out.push_back(&p.w2);
    }
    out.push_back(&user_emb);
    out.push_back(&pref_weights);
    return out;
  }
};

/// Xavier-uniform bound sqrt(6 / (fan_in + fan_out)).
inline double xavier_bound(Index fan_in, Index fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <typename S>
Mat<S> xavier_uniform(Index rows, Index cols, Rng& rng) {
  const double b = xavier_bound(rows, cols);
  Mat<S> m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      m(i, j) = static_cast<S>(rng.uniform(-b, b));
    }
  }
  return m;
}

/// Xavier-uniform projector weights and user table, zero biases, all-ones
/// preference weights (uniform modality attention at the start).
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, int num_users, Rng& rng) {
  cfg.validate();
  if (num_users <= 0) throw ConfigError("init_params: num_users must be positive");
  std::vector<typename ModelParams<S>::Projector> projectors;
  for (int m = 0; m < cfg.num_modalities(); ++m) {
    const Index dm = cfg.modality_dims[m];
    const std::string tag = std::to_string(m);
    projectors.push_back({
        Param<S>("w1_" + tag, xavier_uniform<S>(dm, cfg.hidden_dim, rng)),
        Param<S>("b1_" + tag, Mat<S>::Zero(1, cfg.hidden_dim)),
        Param<S>("w2_" + tag, xavier_uniform<S>(cfg.hidden_dim, cfg.d, rng)),
    });
  }
  Param<S> user_emb("user_emb", xavier_uniform<S>(num_users, cfg.rep_dim(), rng));
  Param<S> pref_weights("pref_weights",
                        Mat<S>::Ones(num_users, cfg.num_blocks()));
  return ModelParams<S>{std::move(projectors), std::move(user_emb),
                        std::move(pref_weights)};
}

/// Concatenated initial item representation (the per-modality projections
/// plus, unless fusion is disabled, the fused block).
template <typename S>
Mat<S> item_initial_rep(const std::vector<Mat<S>>& features, ModelParams<S>& params,
                        const ModelConfig& cfg, S lambda,
                        S singular_tol = S(1e-4)) {
  if (features.size() != static_cast<std::size_t>(cfg.num_modalities())) {
    throw ConfigError("item_initial_rep: feature matrix count mismatch");
  }
  const Index n = features.empty() ? 0 : features[0].rows();
  std::vector<Mat<S>> projected;
  projected.reserve(features.size());
  for (std::size_t m = 0; m < features.size(); ++m) {
    if (features[m].rows() != n) {
      throw DataError("item_initial_rep: feature row counts disagree across modalities");
    }
    projected.push_back(project_modality(features[m], params.projectors[m].w1.value,
                                         params.projectors[m].b1.value,
                                         params.projectors[m].w2.value,
                                         static_cast<S>(cfg.leaky_slope)));
  }
  std::vector<const Mat<S>*> ptrs;
  for (const auto& p : projected) ptrs.push_back(&p);

  Mat<S> out(n, cfg.rep_dim());
  Index off = 0;
  for (const auto& p : projected) {
    out.middleCols(off, cfg.d) = p;
    off += cfg.d;
  }
  if (cfg.fusion == FusionMode::Slerp) {
    out.middleCols(off, cfg.d) = fuse_rows(ptrs, lambda, singular_tol);
  } else if (cfg.fusion == FusionMode::Linear) {
    out.middleCols(off, cfg.d) = fuse_rows_linear(ptrs, lambda);
  }
  return out;
}

/// Fused modality features only (the similarity source for the calibrated
/// loss), at a deterministic lambda. Rows are unit-normalized so the
/// clamped-dot similarity contract holds for every fusion mode.
template <typename S>
Mat<S> fused_features(const std::vector<Mat<S>>& features, ModelParams<S>& params,
                      const ModelConfig& cfg, S lambda = S(0.5),
                      S singular_tol = S(1e-4)) {
  std::vector<Mat<S>> projected;
  projected.reserve(features.size());
  for (std::size_t m = 0; m < features.size(); ++m) {
    projected.push_back(project_modality(features[m], params.projectors[m].w1.value,
                                         params.projectors[m].b1.value,
                                         params.projectors[m].w2.value,
                                         static_cast<S>(cfg.leaky_slope)));
  }
  std::vector<const Mat<S>*> ptrs;
  for (const auto& p : projected) ptrs.push_back(&p);
  switch (cfg.fusion) {
    case FusionMode::Slerp:
      return fuse_rows(ptrs, lambda, singular_tol);
    case FusionMode::Linear:
      return l2_normalize_rows(Mat<S>(fuse_rows_linear(ptrs, lambda)));
    case FusionMode::None: {
      // no fused block in the representation; fall back to the normalized
      // mean of the projected modalities as the similarity source
      Mat<S> acc = projected[0];
      for (std::size_t m = 1; m < projected.size(); ++m) acc += projected[m];
      return l2_normalize_rows(Mat<S>(acc / static_cast<S>(projected.size())));
    }
  }
  throw InternalError("fused_features: unreachable");
}

/// Per-user scaling of the (num_blocks) segments of the user embedding by
/// the learned preference weights.
template <typename S>
Mat<S> mine_preferences(const Mat<S>& user_emb, const Mat<S>& pref_weights) {
  if (user_emb.rows() != pref_weights.rows() || pref_weights.cols() == 0 ||
      user_emb.cols() % pref_weights.cols() != 0) {
    throw ConfigError("mine_preferences: width not divisible by segment count");
  }
  const Index seg = user_emb.cols() / pref_weights.cols();
  Mat<S> out(user_emb.rows(), user_emb.cols());
  for (Index s = 0; s < pref_weights.cols(); ++s) {
    out.middleCols(s * seg, seg) =
        user_emb.middleCols(s * seg, seg).array().colwise() *
        pref_weights.col(s).array();
  }
  return out;
}

template <typename S>
struct ForwardResult {
  Mat<S> user_rep;  // |U| x l, normalization policy applied
  Mat<S> item_rep;  // |I| x l
};

/// Full forward pass: initial item blocks, LightGCN propagation with
/// sum-readout, preference mining, item-item propagation with residual,
/// then optional row normalization of both outputs.
template <typename S>
ForwardResult<S> forward(ModelParams<S>& params, const InteractionGraph<S>& ig,
                         const ItemItemGraph<S>& iig,
                         const std::vector<Mat<S>>& features, const ModelConfig& cfg,
                         S lambda, S singular_tol = S(1e-4)) {
  Mat<S> x0 = item_initial_rep(features, params, cfg, lambda, singular_tol);
  auto [e, x] = propagate_ui(ig, params.user_emb.value, x0, cfg.layers_ui);
  Mat<S> e_hat = mine_preferences(e, params.pref_weights.value);
  Mat<S> x_hat = propagate_ii(iig, x, cfg.layers_ii);
  if (cfg.normalize_reps) {
    e_hat = l2_normalize_rows(e_hat);
    x_hat = l2_normalize_rows(x_hat);
  }
  return {std::move(e_hat), std::move(x_hat)};
}

/// Preference score for one (user, item) pair over final representations.
template <typename S>
S score(const Mat<S>& user_rep, const Mat<S>& item_rep, int u, int i) {
  if (u < 0 || u >= user_rep.rows()) throw DataError("score: user index out of range");
  if (i < 0 || i >= item_rep.rows()) throw DataError("score: item index out of range");
  return user_rep.row(u).dot(item_rep.row(i));
}

// ---------------------------------------------------------------------------
// Tape mirror of the forward pass for training.
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardNodes {
  int user_rep = -1;
  int item_rep = -1;
};

template <typename S>
ForwardNodes<S> forward_on_tape(Tape<S>& t, ParamBinder<S>& binder,
                                ModelParams<S>& params, const InteractionGraph<S>& ig,
                                const ItemItemGraph<S>& iig,
                                const std::vector<Mat<S>>& features,
                                const ModelConfig& cfg, S lambda,
                                S singular_tol = S(1e-4)) {
  if (features.size() != static_cast<std::size_t>(cfg.num_modalities())) {
    throw ConfigError("forward_on_tape: feature matrix count mismatch");
  }
  // projected modality blocks
  std::vector<int> blocks;
  for (std::size_t m = 0; m < features.size(); ++m) {
    const int x = t.constant(features[m]);
    const int w1 = binder.bind(t, params.projectors[m].w1);
    const int b1 = binder.bind(t, params.projectors[m].b1);
    const int w2 = binder.bind(t, params.projectors[m].w2);
    int h = ops::matmul(t, x, w1);
    h = ops::add_row_broadcast(t, h, b1);
    h = ops::leaky_relu(t, h, static_cast<S>(cfg.leaky_slope));
    h = ops::matmul(t, h, w2);
    blocks.push_back(ops::normalize_rows(t, h));
  }
  // fused block via the De Casteljau chain
  if (cfg.fusion != FusionMode::None) {
    int acc = blocks[0];
    for (std::size_t m = 1; m < blocks.size(); ++m) {
      acc = cfg.fusion == FusionMode::Slerp
                ? ops::slerp_rows(t, blocks[m], acc, lambda, singular_tol)
                : ops::lerp_rows(t, blocks[m], acc, lambda);
    }
    blocks.push_back(acc);
  }
  const int x0 = ops::concat_cols(t, blocks);

  // LightGCN propagation with sum readout
  const int e0 = binder.bind(t, params.user_emb);
  int acc_u = e0;
  int acc_i = x0;
  int cur_u = e0;
  int cur_i = x0;
  for (int l = 0; l < cfg.layers_ui; ++l) {
    const int next_u = ops::spmm_const(t, ig.adj_ui, cur_i);
    const int next_i = ops::spmm_const(t, ig.adj_iu, cur_u);
    acc_u = ops::add(t, acc_u, next_u);
    acc_i = ops::add(t, acc_i, next_i);
    cur_u = next_u;
    cur_i = next_i;
  }

  // preference mining
  const int w3 = binder.bind(t, params.pref_weights);
  int e_hat = ops::segment_scale(t, acc_u, w3);

  // item-item propagation with residual
  int x_hat = acc_i;
  if (cfg.layers_ii > 0) {
    int cur = acc_i;
    for (int l = 0; l < cfg.layers_ii; ++l) cur = ops::spmm_const(t, iig.weights, cur);
    x_hat = ops::add(t, cur, acc_i);
  }

  if (cfg.normalize_reps) {
    e_hat = ops::normalize_rows(t, e_hat);
    x_hat = ops::normalize_rows(t, x_hat);
  }
  return {e_hat, x_hat};
}

}  // namespace cm3
