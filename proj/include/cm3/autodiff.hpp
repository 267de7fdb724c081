#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cm3/errors.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

/// Trainable tensor. The gradient buffer matches the value shape and is
/// zeroed when the optimizer consumes it.
template <typename S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Param() = default;
  Param(std::string n, Mat<S> v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat<S>::Zero(value.rows(), value.cols());
  }
};

/// Reverse-mode tape over dense matrices. Nodes are created in topological
/// order by construction, so backward is a single reverse sweep.
template <typename S>
class Tape {
 public:
  using M = Mat<S>;
  using BackwardFn = std::function<void(Tape&)>;

  int leaf(M value, bool requires_grad = false) {
    return push(std::move(value), requires_grad);
  }
  int constant(M value) { return push(std::move(value), false); }
  int scalar(S value) {
    M m(1, 1);
    m(0, 0) = value;
    return push(std::move(m), false);
  }

  int push(M value, bool requires_grad, BackwardFn fn = nullptr) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad = M::Zero(n.value.rows(), n.value.cols());
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backward(int id, BackwardFn fn) { nodes_.at(id).backward = std::move(fn); }

  const M& value(int id) const { return nodes_.at(id).value; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }

  const M& grad(int id) const {
    const Node& n = nodes_.at(id);
    if (!n.requires_grad) throw InternalError("grad requested on constant node");
    return n.grad;
  }
  M& grad_mut(int id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) throw InternalError("grad requested on constant node");
    return n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once. A second sweep on
  /// the same tape is an internal error.
  void backward(int loss_id) {
    if (backward_done_) throw InternalError("double backward on one tape");
    backward_done_ = true;
    Node& loss = nodes_.at(loss_id);
    if (loss.value.size() != 1) {
      throw InvalidInputError("backward: loss node must be scalar");
    }
    if (!loss.requires_grad) return;
    loss.grad.setOnes();
    for (int i = loss_id; i >= 0; --i) {
      if (nodes_[i].requires_grad && nodes_[i].backward) nodes_[i].backward(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    M grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Binds persistent Params to tape leaves and routes leaf gradients back
/// into Param::grad after the sweep.
template <typename S>
class ParamBinder {
 public:
  int bind(Tape<S>& t, Param<S>& p) {
    const int id = t.leaf(p.value, true);
    bound_.emplace_back(&p, id);
    return id;
  }

  void accumulate(const Tape<S>& t) const {
    for (const auto& [p, id] : bound_) p->grad += t.grad(id);
  }

 private:
  std::vector<std::pair<Param<S>*, int>> bound_;
};

// ---------------------------------------------------------------------------
// Tape operations
// ---------------------------------------------------------------------------

namespace ops {

template <typename S>
int matmul(Tape<S>& t, int a, int b) {
  if (t.value(a).cols() != t.value(b).rows()) {
    throw ConfigError("matmul: inner dimensions disagree");
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  const int id = t.push(t.value(a) * t.value(b), rg);
  if (rg) {
    t.set_backward(id, [id, a, b](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      if (tp.requires_grad(a)) tp.grad_mut(a) += g * tp.value(b).transpose();
      if (tp.requires_grad(b)) tp.grad_mut(b) += tp.value(a).transpose() * g;
    });
  }
  return id;
}

template <typename S>
int add(Tape<S>& t, int a, int b) {
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  const int id = t.push(t.value(a) + t.value(b), rg);
  if (rg) {
    t.set_backward(id, [id, a, b](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      if (tp.requires_grad(a)) tp.grad_mut(a) += g;
      if (tp.requires_grad(b)) tp.grad_mut(b) += g;
    });
  }
  return id;
}

template <typename S>
int scale(Tape<S>& t, int a, S factor) {
  const bool rg = t.requires_grad(a);
  const int id = t.push(t.value(a) * factor, rg);
  if (rg) {
    t.set_backward(id, [id, a, factor](Tape<S>& tp) {
      tp.grad_mut(a) += tp.grad(id) * factor;
    });
  }
  return id;
}

/// value = a + bias broadcast over rows; bias is 1 x C.
template <typename S>
int add_row_broadcast(Tape<S>& t, int a, int bias) {
  if (t.value(bias).rows() != 1 || t.value(bias).cols() != t.value(a).cols()) {
    throw ConfigError("add_row_broadcast: bias must be 1 x cols(a)");
  }
  Mat<S> v = t.value(a);
  v.rowwise() += t.value(bias).row(0);
  const bool rg = t.requires_grad(a) || t.requires_grad(bias);
  const int id = t.push(std::move(v), rg);
  if (rg) {
    t.set_backward(id, [id, a, bias](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      if (tp.requires_grad(a)) tp.grad_mut(a) += g;
      if (tp.requires_grad(bias)) tp.grad_mut(bias).row(0) += g.colwise().sum();
    });
  }
  return id;
}

template <typename S>
int leaky_relu(Tape<S>& t, int a, S slope) {
  const Mat<S>& x = t.value(a);
  Mat<S> v = x.unaryExpr([slope](S e) { return e > S(0) ? e : slope * e; });
  const bool rg = t.requires_grad(a);
  const int id = t.push(std::move(v), rg);
  if (rg) {
    t.set_backward(id, [id, a, slope](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      const auto& x = tp.value(a);
      tp.grad_mut(a).array() +=
          g.array() * (x.array() > S(0)).template cast<S>().unaryExpr([slope](S m) {
            return m > S(0) ? S(1) : slope;
          });
    });
  }
  return id;
}

/// Row-wise L2 normalization; rows with norm <= eps map to zero rows and
/// receive zero gradient.
template <typename S>
int normalize_rows(Tape<S>& t, int a, S eps = S(1e-12)) {
  const bool rg = t.requires_grad(a);
  const int id = t.push(l2_normalize_rows(t.value(a), eps), rg);
  if (rg) {
    t.set_backward(id, [id, a, eps](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      const auto& x = tp.value(a);
      const auto& r = tp.value(id);
      auto& gx = tp.grad_mut(a);
      for (Index i = 0; i < x.rows(); ++i) {
        const S n = x.row(i).norm();
        if (n <= eps) continue;
        const S proj = g.row(i).dot(r.row(i));
        gx.row(i) += (g.row(i) - proj * r.row(i)) / n;
      }
    });
  }
  return id;
}

/// Row-wise spherical interpolation between unit-row matrices; lambda
/// weights the first argument. Near-parallel and near-antipodal rows fall
/// back to renormalized linear interpolation; the main branch also
/// renormalizes, so roundoff never compounds across chained calls.
template <typename S>
int slerp_rows(Tape<S>& t, int a, int b, S lambda, S singular_tol) {
  const Mat<S>& av = t.value(a);
  const Mat<S>& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw ConfigError("slerp_rows: shape mismatch");
  }
  const S pi = static_cast<S>(M_PI);
  Mat<S> out(av.rows(), av.cols());
  for (Index i = 0; i < av.rows(); ++i) {
    const S c = std::clamp(av.row(i).dot(bv.row(i)), S(-1), S(1));
    const S theta = std::acos(c);
    Eigen::RowVector<S, Eigen::Dynamic> r;
    if (theta < singular_tol || theta > pi - singular_tol) {
      r = lambda * av.row(i) + (S(1) - lambda) * bv.row(i);
    } else {
      const S s = std::sin(theta);
      r = (std::sin(lambda * theta) * av.row(i) +
           std::sin((S(1) - lambda) * theta) * bv.row(i)) /
          s;
    }
    const S n = r.norm();
    out.row(i) = n > S(1e-12)
                     ? (r / n).eval()
                     : Eigen::RowVector<S, Eigen::Dynamic>::Zero(av.cols()).eval();
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  const int id = t.push(std::move(out), rg);
  if (rg) {
    t.set_backward(id, [id, a, b, lambda, singular_tol, pi](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      const auto& av = tp.value(a);
      const auto& bv = tp.value(b);
      const auto& rv = tp.value(id);
      const bool ga = tp.requires_grad(a);
      const bool gb = tp.requires_grad(b);
      for (Index i = 0; i < av.rows(); ++i) {
        const S c = std::clamp(av.row(i).dot(bv.row(i)), S(-1), S(1));
        const S theta = std::acos(c);
        const bool fallback = theta < singular_tol || theta > pi - singular_tol;
        // recompute the pre-normalization norm, then pull g through the
        // renormalization before the branch-specific jacobian
        S n;
        if (fallback) {
          n = (lambda * av.row(i) + (S(1) - lambda) * bv.row(i)).norm();
        } else {
          const S s = std::sin(theta);
          n = ((std::sin(lambda * theta) * av.row(i) +
                std::sin((S(1) - lambda) * theta) * bv.row(i)) /
               s)
                  .norm();
        }
        if (n <= S(1e-12)) continue;
        const Eigen::RowVector<S, Eigen::Dynamic> gn =
            (g.row(i) - g.row(i).dot(rv.row(i)) * rv.row(i)) / n;
        if (fallback) {
          if (ga) tp.grad_mut(a).row(i) += lambda * gn;
          if (gb) tp.grad_mut(b).row(i) += (S(1) - lambda) * gn;
        } else {
          const S s = std::sin(theta);
          const S u = std::sin(lambda * theta) / s;
          const S v = std::sin((S(1) - lambda) * theta) / s;
          const S du = (lambda * std::cos(lambda * theta) - u * c) / s;
          const S dv = ((S(1) - lambda) * std::cos((S(1) - lambda) * theta) - v * c) / s;
          const S k = (gn.dot(av.row(i)) * du + gn.dot(bv.row(i)) * dv) / s;
          if (ga) tp.grad_mut(a).row(i) += u * gn - k * bv.row(i);
          if (gb) tp.grad_mut(b).row(i) += v * gn - k * av.row(i);
        }
      }
    });
  }
  return id;
}

/// Row-wise linear interpolation lambda*a + (1-lambda)*b, no renormalization.
template <typename S>
int lerp_rows(Tape<S>& t, int a, int b, S lambda) {
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  const int id =
      t.push(lambda * t.value(a) + (S(1) - lambda) * t.value(b), rg);
  if (rg) {
    t.set_backward(id, [id, a, b, lambda](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      if (tp.requires_grad(a)) tp.grad_mut(a) += lambda * g;
      if (tp.requires_grad(b)) tp.grad_mut(b) += (S(1) - lambda) * g;
    });
  }
  return id;
}

template <typename S>
int concat_cols(Tape<S>& t, const std::vector<int>& parts) {
  if (parts.empty()) throw InvalidInputError("concat_cols: empty part list");
  const Index rows = t.value(parts[0]).rows();
  Index cols = 0;
  for (int p : parts) {
    if (t.value(p).rows() != rows) throw ConfigError("concat_cols: row mismatch");
    cols += t.value(p).cols();
  }
  Mat<S> v(rows, cols);
  Index off = 0;
  bool rg = false;
  for (int p : parts) {
    v.middleCols(off, t.value(p).cols()) = t.value(p);
    off += t.value(p).cols();
    rg = rg || t.requires_grad(p);
  }
  const int id = t.push(std::move(v), rg);
  if (rg) {
    t.set_backward(id, [id, parts](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      Index off = 0;
      for (int p : parts) {
        const Index w = tp.value(p).cols();
        if (tp.requires_grad(p)) tp.grad_mut(p) += g.middleCols(off, w);
        off += w;
      }
    });
  }
  return id;
}

/// Product with a constant sparse matrix. The sparse matrix must outlive
/// the tape.
template <typename S>
int spmm_const(Tape<S>& t, const SpMat<S>& a, int x) {
  const bool rg = t.requires_grad(x);
  const int id = t.push(spmm(a, t.value(x)), rg);
  if (rg) {
    const SpMat<S>* ap = &a;
    t.set_backward(id, [id, x, ap](Tape<S>& tp) {
      tp.grad_mut(x) += ap->transpose() * tp.grad(id);
    });
  }
  return id;
}

/// Selects rows by index, with repetition allowed; backward scatter-adds.
template <typename S>
int gather_rows(Tape<S>& t, int x, std::vector<int> rows) {
  const Mat<S>& xv = t.value(x);
  Mat<S> v(static_cast<Index>(rows.size()), xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= xv.rows()) {
      throw DataError("gather_rows: index out of range");
    }
    v.row(static_cast<Index>(r)) = xv.row(rows[r]);
  }
  const bool rg = t.requires_grad(x);
  const int id = t.push(std::move(v), rg);
  if (rg) {
    auto idx = std::make_shared<std::vector<int>>(std::move(rows));
    t.set_backward(id, [id, x, idx](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      auto& gx = tp.grad_mut(x);
      for (std::size_t r = 0; r < idx->size(); ++r) {
        gx.row((*idx)[r]) += g.row(static_cast<Index>(r));
      }
    });
  }
  return id;
}

/// Scales column segment s of each row of e by w(row, s); segments have
/// equal width e.cols() / w.cols().
template <typename S>
int segment_scale(Tape<S>& t, int e, int w) {
  const Mat<S>& ev = t.value(e);
  const Mat<S>& wv = t.value(w);
  if (ev.rows() != wv.rows() || wv.cols() == 0 || ev.cols() % wv.cols() != 0) {
    throw ConfigError("segment_scale: rep width not divisible into segments");
  }
  const Index seg = ev.cols() / wv.cols();
  Mat<S> v(ev.rows(), ev.cols());
  for (Index s = 0; s < wv.cols(); ++s) {
    v.middleCols(s * seg, seg) =
        ev.middleCols(s * seg, seg).array().colwise() * wv.col(s).array();
  }
  const bool rg = t.requires_grad(e) || t.requires_grad(w);
  const int id = t.push(std::move(v), rg);
  if (rg) {
    t.set_backward(id, [id, e, w, seg](Tape<S>& tp) {
      const auto& g = tp.grad(id);
      const auto& ev = tp.value(e);
      const auto& wv = tp.value(w);
      for (Index s = 0; s < wv.cols(); ++s) {
        if (tp.requires_grad(e)) {
          tp.grad_mut(e).middleCols(s * seg, seg) +=
              (g.middleCols(s * seg, seg).array().colwise() * wv.col(s).array())
                  .matrix();
        }
        if (tp.requires_grad(w)) {
          tp.grad_mut(w).col(s) +=
              (g.middleCols(s * seg, seg).array() * ev.middleCols(s * seg, seg).array())
                  .rowwise()
                  .sum()
                  .matrix();
        }
      }
    });
  }
  return id;
}

/// Mean squared row distance between two equally shaped matrices (the
/// alignment reduction). Returns a 1x1 node; accumulates in double.
template <typename S>
int mean_pair_sqdist(Tape<S>& t, int a, int b) {
  const Mat<S>& av = t.value(a);
  const Mat<S>& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw ConfigError("mean_pair_sqdist: shape mismatch");
  }
  if (av.rows() == 0) throw InvalidInputError("mean_pair_sqdist: empty batch");
  double acc = 0.0;
  for (Index i = 0; i < av.rows(); ++i) {
    acc += static_cast<double>((av.row(i) - bv.row(i)).squaredNorm());
  }
  Mat<S> v(1, 1);
  v(0, 0) = static_cast<S>(acc / static_cast<double>(av.rows()));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  const int id = t.push(std::move(v), rg);
  if (rg) {
    t.set_backward(id, [id, a, b](Tape<S>& tp) {
      const S g = tp.grad(id)(0, 0);
      const auto& av = tp.value(a);
      const auto& bv = tp.value(b);
      const S f = g * S(2) / static_cast<S>(av.rows());
      if (tp.requires_grad(a)) tp.grad_mut(a) += f * (av - bv);
      if (tp.requires_grad(b)) tp.grad_mut(b) -= f * (av - bv);
    });
  }
  return id;
}

/// log mean exp over all unordered distinct row pairs of
/// exp(-t * (||v_a - v_b||^2 + offset(a, b))). `offsets` is either empty or
/// a constant square matrix (gradient never flows through it). This is the
/// uniformity reduction; the calibrated variant passes offset = 2*phi - 2.
template <typename S>
int pairwise_uniformity(Tape<S>& t, int v, double temperature, MatD offsets = MatD()) {
  const Mat<S>& vv = t.value(v);
  const Index n = vv.rows();
  if (n < 2) throw InvalidInputError("pairwise_uniformity: need at least 2 vectors");
  if (offsets.size() != 0 && (offsets.rows() != n || offsets.cols() != n)) {
    throw ConfigError("pairwise_uniformity: offset matrix shape mismatch");
  }
  const bool has_off = offsets.size() != 0;
  // exponents for all unordered pairs, double precision
  std::vector<double> expo;
  expo.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      double d2 = static_cast<double>((vv.row(i) - vv.row(j)).squaredNorm());
      if (has_off) d2 += offsets(i, j);
      expo.push_back(-temperature * d2);
    }
  }
  const double lme = log_mean_exp(std::span<const double>(expo));
  Mat<S> out(1, 1);
  out(0, 0) = static_cast<S>(lme);
  const bool rg = t.requires_grad(v);
  const int id = t.push(std::move(out), rg);
  if (rg) {
    auto off = std::make_shared<MatD>(std::move(offsets));
    t.set_backward(id, [id, v, temperature, off](Tape<S>& tp) {
      const S gout = tp.grad(id)(0, 0);
      const auto& vv = tp.value(v);
      const Index n = vv.rows();
      const bool has_off = off->size() != 0;
      // recompute softmax weights over pair exponents
      std::vector<double> expo;
      expo.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
      double mx = -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j) {
          double d2 = static_cast<double>((vv.row(i) - vv.row(j)).squaredNorm());
          if (has_off) d2 += (*off)(i, j);
          const double e = -temperature * d2;
          expo.push_back(e);
          mx = std::max(mx, e);
        }
      }
      double z = 0.0;
      for (double e : expo) z += std::exp(e - mx);
      auto& gv = tp.grad_mut(v);
      std::size_t k = 0;
      for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j, ++k) {
          const double w = std::exp(expo[k] - mx) / z;
          const S f = gout * static_cast<S>(-2.0 * temperature * w);
          gv.row(i) += f * (vv.row(i) - vv.row(j));
          gv.row(j) += f * (vv.row(j) - vv.row(i));
        }
      }
    });
  }
  return id;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  Mat<S> m, v;
  long step = 0;
};

/// Standard Adam with bias correction. Gradients are zeroed after the
/// update; a non-finite gradient aborts the step.
template <typename S>
void adam_step(std::span<Param<S>* const> params, std::vector<AdamState<S>>& states,
               const AdamConfig& cfg) {
  if (states.size() < params.size()) states.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<S>& p = *params[i];
    if (!p.grad.allFinite()) {
      throw NumericError("adam_step: non-finite gradient in parameter '" + p.name + "'");
    }
    AdamState<S>& st = states[i];
    if (st.m.size() == 0) {
      st.m = Mat<S>::Zero(p.value.rows(), p.value.cols());
      st.v = Mat<S>::Zero(p.value.rows(), p.value.cols());
    }
    st.step += 1;
    const S b1 = static_cast<S>(cfg.beta1);
    const S b2 = static_cast<S>(cfg.beta2);
    st.m = b1 * st.m + (S(1) - b1) * p.grad;
    st.v = (b2 * st.v.array() + (S(1) - b2) * p.grad.array().square()).matrix();
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    const Mat<S> mhat = st.m / static_cast<S>(c1);
    const Mat<S> vhat = st.v / static_cast<S>(c2);
    p.value.array() -= static_cast<S>(cfg.lr) * mhat.array() /
                       (vhat.array().sqrt() + static_cast<S>(cfg.eps));
    p.grad.setZero();
  }
}

template <typename S>
void adam_step(const std::vector<Param<S>*>& params, std::vector<AdamState<S>>& states,
               const AdamConfig& cfg) {
  adam_step(std::span<Param<S>* const>(params.data(), params.size()), states, cfg);
}

}  // namespace cm3
