#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cm3/autodiff.hpp"
#include "cm3/data.hpp"
#include "cm3/errors.hpp"
#include "cm3/eval.hpp"
#include "cm3/fusion.hpp"
#include "cm3/graphs.hpp"
#include "cm3/losses.hpp"
#include "cm3/model.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

struct TrainConfig {
  int max_epochs = 100;
  int patience = 10;
  double lr = 1e-3;
  std::uint64_t seed = 42;
  int knn_k = 10;
  int eval_k = 20;  // early-stop metric: validation Recall at this k
  bool timing = true;
  std::uint64_t random_features_seed = 0;  // nonzero: replace features with seeded noise
  std::vector<double> gamma_grid;          // used by grid_search
  LossConfig loss;
  FusionConfig fusion;
  ModelConfig model;

  void validate() const {
    if (max_epochs < 1) throw ConfigError("TrainConfig: max_epochs must be >= 1");
    if (patience < 1 || patience > max_epochs) {
      throw ConfigError("TrainConfig: patience must lie in [1, max_epochs]");
    }
    if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
    if (knn_k < 1) throw ConfigError("TrainConfig: knn_k must be >= 1");
    if (eval_k < 1) throw ConfigError("TrainConfig: eval_k must be >= 1");
    for (double g : gamma_grid) {
      if (!(g > 0.0)) throw ConfigError("TrainConfig: grid gammas must be positive");
    }
    loss.validate();
    fusion.validate();
  }
};

struct EpochDiagnostics {
  int epoch = 0;
  double l_align = 0.0;
  double l_uniform_user = 0.0;
  double l_cal_uniform_item = 0.0;  // standard item uniformity in the ablation
  double val_recall = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  ModelParams<float> params;  // best checkpoint
  ModelConfig model_cfg;
  int best_epoch = -1;
  double best_metric = -1.0;
  int epochs_run = 0;
  bool aborted = false;  // non-finite loss; params hold the last good state
  std::vector<EpochDiagnostics> diagnostics;
};

inline void write_diagnostics_csv(const std::string& path,
                                  const std::vector<EpochDiagnostics>& diags) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write diagnostics '" + path + "'");
  os << "epoch,l_align,l_uniform_user,l_cal_uniform_item,val_recall20,seconds\n";
  os << std::setprecision(10);
  for (const auto& d : diags) {
    os << d.epoch << "," << d.l_align << "," << d.l_uniform_user << ","
       << d.l_cal_uniform_item << "," << d.val_recall << "," << d.seconds << "\n";
  }
}

namespace detail {

inline std::vector<int> sorted_unique(const std::vector<int>& v) {
  std::set<int> s(v.begin(), v.end());
  return std::vector<int>(s.begin(), s.end());
}

inline std::vector<MatF> training_features(const Dataset& ds, const TrainConfig& cfg) {
  if (ds.features.empty()) throw DataError("train: dataset has no feature matrices");
  if (cfg.random_features_seed == 0) return ds.features;
  // contrast condition: seeded random features of identical dimensions
  Rng rng(cfg.random_features_seed);
  std::vector<MatF> out;
  for (const auto& f : ds.features) {
    MatF r(f.rows(), f.cols());
    for (Index i = 0; i < r.rows(); ++i) {
      for (Index j = 0; j < r.cols(); ++j) r(i, j) = static_cast<float>(rng.normal());
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace detail

/// One optimization run: per epoch, batched forward/backward/Adam on the
/// total objective, then validation Recall@k for model selection. Stops
/// after `patience` epochs without improvement and returns the best
/// checkpoint.
inline TrainResult train(const Dataset& ds, TrainConfig cfg) {
  cfg.validate();
  if (!ds.has_splits()) throw InvalidInputError("train: dataset has no splits");

  const std::vector<MatF> features = detail::training_features(ds, cfg);
  cfg.model.modality_dims.clear();
  for (const auto& f : features) cfg.model.modality_dims.push_back(f.cols());
  cfg.model.validate();

  // graphs come from the training split only; the item graph is frozen
  // content so it sees every item
  const auto train_edges = ds.edges(Split::train);
  const auto ig = build_interaction_graph<float>(train_edges, ds.num_users(), ds.num_items());
  std::vector<const MatF*> fptr;
  for (const auto& f : features) fptr.push_back(&f);
  const auto iig = build_item_item_graph<float>(fptr, std::min(cfg.knn_k, ds.num_items() - 1));

  Rng root(cfg.seed);
  Rng init_rng = root.fork(1);
  Rng lambda_rng = root.fork(2);
  auto params = init_params<float>(cfg.model, ds.num_users(), init_rng);
  std::vector<AdamState<float>> adam_states;
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  const float tol = static_cast<float>(cfg.fusion.singular_tol);

  TrainResult res;
  res.model_cfg = cfg.model;
  res.params = params;  // last-good fallback before any epoch completes
  double best = -std::numeric_limits<double>::infinity();

  MatF phi_fused_cache;  // per-epoch cache of fused similarity sources
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.loss.kind == LossKind::Calibrated && cfg.loss.phi_cache == PhiCache::Epoch) {
      phi_fused_cache = fused_features(features, params, cfg.model, 0.5f, tol);
    }
    double sum_align = 0.0, sum_uu = 0.0, sum_iu = 0.0;
    int batches_done = 0;
    bool stop_all = false;
    for (const auto& batch : epoch_batches(ds, cfg.loss.batch_size, root.fork(1000 + epoch))) {
      const float lambda = static_cast<float>(sample_lambda(cfg.fusion, lambda_rng));
      std::vector<int> users, items;
      for (const auto& it : batch) {
        users.push_back(it.user);
        items.push_back(it.item);
      }
      const auto uniq_users = detail::sorted_unique(users);
      const auto uniq_items = detail::sorted_unique(items);

      Tape<float> tape;
      ParamBinder<float> binder;
      const auto nodes =
          forward_on_tape(tape, binder, params, ig, iig, features, cfg.model, lambda, tol);
      const int eu = ops::gather_rows(tape, nodes.user_rep, users);
      const int xi = ops::gather_rows(tape, nodes.item_rep, items);
      const int align = ops::mean_pair_sqdist(tape, eu, xi);

      int uu = -1, iu = -1;
      if (uniq_users.size() >= 2) {
        const int urows = ops::gather_rows(tape, nodes.user_rep, uniq_users);
        uu = ops::pairwise_uniformity(tape, urows, cfg.loss.t);
      }
      if (uniq_items.size() >= 2) {
        const int irows = ops::gather_rows(tape, nodes.item_rep, uniq_items);
        if (cfg.loss.kind == LossKind::Calibrated) {
          MatF fused_rows(static_cast<Index>(uniq_items.size()), cfg.model.d);
          if (cfg.loss.phi_cache == PhiCache::Epoch) {
            for (std::size_t r = 0; r < uniq_items.size(); ++r) {
              fused_rows.row(static_cast<Index>(r)) = phi_fused_cache.row(uniq_items[r]);
            }
          } else {
            std::vector<MatF> sub;
            for (const auto& f : features) {
              MatF s(static_cast<Index>(uniq_items.size()), f.cols());
              for (std::size_t r = 0; r < uniq_items.size(); ++r) {
                s.row(static_cast<Index>(r)) = f.row(uniq_items[r]);
              }
              sub.push_back(std::move(s));
            }
            fused_rows = fused_features(sub, params, cfg.model, 0.5f, tol);
          }
          const MatD phi = similarity_matrix(fused_rows);
          const MatD offsets = 2.0 * phi.array() - 2.0;
          iu = ops::pairwise_uniformity(tape, irows, cfg.loss.t, offsets);
        } else {
          iu = ops::pairwise_uniformity(tape, irows, cfg.loss.t);
        }
      }

      int total = align;
      const double uu_val = uu >= 0 ? tape.value(uu)(0, 0) : 0.0;
      const double iu_val = iu >= 0 ? tape.value(iu)(0, 0) : 0.0;
      if (uu >= 0 && iu >= 0) {
        total = ops::add(
            tape, align,
            ops::scale(tape, ops::add(tape, uu, iu), static_cast<float>(cfg.loss.gamma)));
      } else if (uu >= 0 || iu >= 0) {
        total = ops::add(tape, align,
                         ops::scale(tape, uu >= 0 ? uu : iu,
                                    static_cast<float>(cfg.loss.gamma)));
      }
      double total_val;
      try {
        total_val = total_loss(tape.value(align)(0, 0), uu_val, iu_val, cfg.loss.gamma);
      } catch (const NumericError&) {
        res.aborted = true;
        stop_all = true;
        break;
      }
      (void)total_val;
      tape.backward(total);
      binder.accumulate(tape);
      try {
        adam_step(params.all(), adam_states, adam_cfg);
      } catch (const NumericError&) {
        res.aborted = true;
        stop_all = true;
        break;
      }
      sum_align += tape.value(align)(0, 0);
      sum_uu += uu_val;
      sum_iu += iu_val;
      batches_done += 1;
    }
    if (stop_all) break;
    if (batches_done == 0) throw InternalError("train: epoch produced no batches");

    // validation with the deterministic lambda
    const auto fwd = forward(params, ig, iig, features, cfg.model, 0.5f, tol);
    const auto ranking = evaluate(fwd.user_rep, fwd.item_rep, ds, Split::valid, {cfg.eval_k});
    const double metric = ranking.recall[0];

    EpochDiagnostics diag;
    diag.epoch = epoch;
    diag.l_align = sum_align / batches_done;
    diag.l_uniform_user = sum_uu / batches_done;
    diag.l_cal_uniform_item = sum_iu / batches_done;
    diag.val_recall = metric;
    diag.seconds = cfg.timing
                       ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                       : 0.0;
    res.diagnostics.push_back(diag);
    res.epochs_run = epoch;

    if (metric > best) {  // ties keep the earlier epoch
      best = metric;
      res.best_epoch = epoch;
      res.best_metric = metric;
      res.params = params;
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gamma grid search
// ---------------------------------------------------------------------------

inline std::vector<double> default_gamma_grid() {
  std::vector<double> grid;
  for (int k = 1; k <= 15; ++k) grid.push_back(0.2 * k);
  return grid;
}

struct GridRow {
  double gamma = 0.0;
  double val_metric = 0.0;
  int best_epoch = -1;
};

struct GridResult {
  std::vector<GridRow> rows;
  double best_gamma = 0.0;
  TrainResult best;
};

inline void write_grid_csv(const std::string& path, const std::vector<GridRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write grid table '" + path + "'");
  os << "gamma,val_recall20,best_epoch\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.gamma << "," << r.val_metric << "," << r.best_epoch << "\n";
  }
}

/// Trains one independent run per grid point with identical seeds and keeps
/// the best validation metric; ties keep the earlier gamma.
inline GridResult grid_search(const Dataset& ds, TrainConfig cfg) {
  std::vector<double> grid = cfg.gamma_grid.empty() ? default_gamma_grid() : cfg.gamma_grid;
  GridResult out;
  double best = -std::numeric_limits<double>::infinity();
  for (double gamma : grid) {
    TrainConfig run_cfg = cfg;
    run_cfg.loss.gamma = gamma;
    TrainResult r = train(ds, run_cfg);
    out.rows.push_back({gamma, r.best_metric, r.best_epoch});
    if (r.best_metric > best) {
      best = r.best_metric;
      out.best_gamma = gamma;
      out.best = std::move(r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "CM3C", u16 format version, config + seed +
// all parameter tensors, little-endian. Writes are atomic
// (temp-then-rename).
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelParams<float> params;
  ModelConfig model;
  double t = 1.0;
  double gamma = 1.0;
  double alpha = 1.0;
  double singular_tol = 1e-4;
  LossKind loss_kind = LossKind::Calibrated;
  std::vector<std::string> modality_names;
  std::uint64_t seed = 0;
  int knn_k = 10;
  std::uint64_t random_features_seed = 0;
};

namespace detail {

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("unexpected end of checkpoint");
  return s;
}

inline void write_mat(std::ostream& os, const MatF& m) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(float) * m.size()));
}

inline MatF read_mat(std::istream& is) {
  const auto rows = read_pod<std::uint32_t>(is);
  const auto cols = read_pod<std::uint32_t>(is);
  MatF m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(float) * m.size()));
  if (!is) throw FormatError("unexpected end of checkpoint");
  return m;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open '" + tmp + "' for writing");
    os.write("CM3C", 4);
    detail::write_pod<std::uint16_t>(os, 1);
    detail::write_pod<std::uint64_t>(os, ckpt.seed);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.model.d));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.model.hidden_dim));
    detail::write_pod<std::int32_t>(os, ckpt.model.layers_ui);
    detail::write_pod<std::int32_t>(os, ckpt.model.layers_ii);
    detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(ckpt.model.fusion));
    detail::write_pod<std::uint8_t>(os, ckpt.model.normalize_reps ? 1 : 0);
    detail::write_pod<double>(os, ckpt.model.leaky_slope);
    detail::write_pod<double>(os, ckpt.t);
    detail::write_pod<double>(os, ckpt.gamma);
    detail::write_pod<double>(os, ckpt.alpha);
    detail::write_pod<double>(os, ckpt.singular_tol);
    detail::write_pod<std::uint8_t>(os, ckpt.loss_kind == LossKind::Calibrated ? 1 : 0);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.knn_k));
    detail::write_pod<std::uint64_t>(os, ckpt.random_features_seed);
    const auto n_mod = static_cast<std::uint32_t>(ckpt.model.modality_dims.size());
    detail::write_pod<std::uint32_t>(os, n_mod);
    for (std::uint32_t m = 0; m < n_mod; ++m) {
      detail::write_string(os, m < ckpt.modality_names.size() ? ckpt.modality_names[m]
                                                              : "modality" + std::to_string(m));
      detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.model.modality_dims[m]));
    }
    for (const auto& proj : ckpt.params.projectors) {
      detail::write_mat(os, proj.w1.value);
      detail::write_mat(os, proj.b1.value);
      detail::write_mat(os, proj.w2.value);
    }
    detail::write_mat(os, ckpt.params.user_emb.value);
    detail::write_mat(os, ckpt.params.pref_weights.value);
    if (!os) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CM3C", 4) != 0) {
    throw FormatError("'" + path + "' is not a CM3C checkpoint");
  }
  const auto version = detail::read_pod<std::uint16_t>(is);
  if (version != 1) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.seed = detail::read_pod<std::uint64_t>(is);
  ckpt.model.d = detail::read_pod<std::uint32_t>(is);
  ckpt.model.hidden_dim = detail::read_pod<std::uint32_t>(is);
  ckpt.model.layers_ui = detail::read_pod<std::int32_t>(is);
  ckpt.model.layers_ii = detail::read_pod<std::int32_t>(is);
  ckpt.model.fusion = static_cast<FusionMode>(detail::read_pod<std::uint8_t>(is));
  ckpt.model.normalize_reps = detail::read_pod<std::uint8_t>(is) != 0;
  ckpt.model.leaky_slope = detail::read_pod<double>(is);
  ckpt.t = detail::read_pod<double>(is);
  ckpt.gamma = detail::read_pod<double>(is);
  ckpt.alpha = detail::read_pod<double>(is);
  ckpt.singular_tol = detail::read_pod<double>(is);
  ckpt.loss_kind = detail::read_pod<std::uint8_t>(is) ? LossKind::Calibrated : LossKind::Standard;
  ckpt.knn_k = static_cast<int>(detail::read_pod<std::uint32_t>(is));
  ckpt.random_features_seed = detail::read_pod<std::uint64_t>(is);
  const auto n_mod = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t m = 0; m < n_mod; ++m) {
    ckpt.modality_names.push_back(detail::read_string(is));
    ckpt.model.modality_dims.push_back(detail::read_pod<std::uint32_t>(is));
  }
  for (std::uint32_t m = 0; m < n_mod; ++m) {
    const std::string tag = std::to_string(m);
    MatF w1 = detail::read_mat(is);
    MatF b1 = detail::read_mat(is);
    MatF w2 = detail::read_mat(is);
    ckpt.params.projectors.push_back({Param<float>("w1_" + tag, std::move(w1)),
                                      Param<float>("b1_" + tag, std::move(b1)),
                                      Param<float>("w2_" + tag, std::move(w2))});
  }
  ckpt.params.user_emb = Param<float>("user_emb", detail::read_mat(is));
  ckpt.params.pref_weights = Param<float>("pref_weights", detail::read_mat(is));
  return ckpt;
}

}  // namespace cm3
