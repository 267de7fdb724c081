#pragma once

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "cm3/data.hpp"
#include "cm3/errors.hpp"
#include "cm3/losses.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

/// |top-k intersect truth| / |truth|.
inline double recall_at_k(const std::vector<int>& ranked, const std::set<int>& truth,
                          int k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  if (truth.empty()) throw InvalidInputError("recall_at_k: empty ground truth");
  int hits = 0;
  for (int r = 0; r < std::min<int>(k, static_cast<int>(ranked.size())); ++r) {
    hits += truth.count(ranked[r]) > 0;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// DCG with unit gains and 1/log2(rank+1) discounts, normalized by the
/// ideal DCG of min(|truth|, k) hits.
inline double ndcg_at_k(const std::vector<int>& ranked, const std::set<int>& truth,
                        int k) {
  if (k < 1) throw ConfigError("ndcg_at_k: k must be >= 1");
  if (truth.empty()) throw InvalidInputError("ndcg_at_k: empty ground truth");
  double dcg = 0.0;
  for (int r = 0; r < std::min<int>(k, static_cast<int>(ranked.size())); ++r) {
    if (truth.count(ranked[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  double idcg = 0.0;
  const int ideal = std::min<int>(k, static_cast<int>(truth.size()));
  for (int r = 0; r < ideal; ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

struct RankingResult {
  std::vector<int> ks;
  std::vector<double> recall;  // parallel to ks, macro-averaged
  std::vector<double> ndcg;
  int users_evaluated = 0;
  // per evaluated user: (user id, ranked list truncated at max k)
  std::vector<std::pair<int, std::vector<int>>> topk;
};

/// Ranks all items for one user by score, ties to the lower item id, with
/// the masked items removed entirely.
template <typename S>
std::vector<int> rank_items(const Mat<S>& user_rep, const Mat<S>& item_rep, int user,
                            const std::set<int>& masked, int keep) {
  if (user < 0 || user >= user_rep.rows()) throw DataError("rank_items: user out of range");
  std::vector<std::pair<S, int>> scored;
  scored.reserve(item_rep.rows());
  const Vec<S> scores = item_rep * user_rep.row(user).transpose();
  for (Index i = 0; i < item_rep.rows(); ++i) {
    if (masked.count(static_cast<int>(i))) continue;
    scored.emplace_back(scores(i), static_cast<int>(i));
  }
  const int take = std::min<int>(keep, static_cast<int>(scored.size()));
  std::partial_sort(scored.begin(), scored.begin() + take, scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });
  std::vector<int> out;
  out.reserve(take);
  for (int r = 0; r < take; ++r) out.push_back(scored[r].second);
  return out;
}

/// Full evaluation for one phase: per user, every item is scored, the
/// user's training items are masked, and Recall/NDCG are macro-averaged
/// over users with at least one ground-truth item.
template <typename S>
RankingResult evaluate(const Mat<S>& user_rep, const Mat<S>& item_rep,
                       const Dataset& ds, Split phase,
                       std::vector<int> ks = {10, 20}) {
  if (!ds.has_splits()) throw InvalidInputError("evaluate: dataset has no splits");
  std::sort(ks.begin(), ks.end());
  const int max_k = ks.back();
  const auto truth = truth_by_user(ds, phase);
  const auto train_truth = truth_by_user(ds, Split::train);

  RankingResult res;
  res.ks = ks;
  res.recall.assign(ks.size(), 0.0);
  res.ndcg.assign(ks.size(), 0.0);
  for (int u = 0; u < ds.num_users(); ++u) {
    if (truth[u].empty()) continue;
    const std::set<int> truth_set(truth[u].begin(), truth[u].end());
    const std::set<int> masked(train_truth[u].begin(), train_truth[u].end());
    const auto ranked = rank_items(user_rep, item_rep, u, masked, max_k);
    for (std::size_t j = 0; j < ks.size(); ++j) {
      res.recall[j] += recall_at_k(ranked, truth_set, ks[j]);
      res.ndcg[j] += ndcg_at_k(ranked, truth_set, ks[j]);
    }
    res.topk.emplace_back(u, ranked);
    res.users_evaluated += 1;
  }
  if (res.users_evaluated > 0) {
    for (std::size_t j = 0; j < ks.size(); ++j) {
      res.recall[j] /= res.users_evaluated;
      res.ndcg[j] /= res.users_evaluated;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Training-dynamics diagnostics
// ---------------------------------------------------------------------------

/// Seeded sample of `count` ordered index pairs (a != b) from [0, n).
/// Shrinks to full enumeration when the population of unordered pairs is
/// smaller than the request.
inline std::vector<std::pair<int, int>> sample_pairs(int n, int count,
                                                     std::uint64_t seed,
                                                     bool* shrunk = nullptr) {
  if (n < 2) throw InvalidInputError("sample_pairs: need at least 2 elements");
  std::vector<std::pair<int, int>> pairs;
  const long long all = static_cast<long long>(n) * (n - 1) / 2;
  if (all <= count) {
    if (shrunk) *shrunk = true;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    }
    return pairs;
  }
  if (shrunk) *shrunk = false;
  Rng rng(seed);
  pairs.reserve(count);
  while (static_cast<int>(pairs.size()) < count) {
    const int a = static_cast<int>(rng.index(n));
    const int b = static_cast<int>(rng.index(n));
    if (a != b) pairs.emplace_back(a, b);
  }
  return pairs;
}

struct AuMeasures {
  double align = 0.0;
  double uniform_user = 0.0;
  double uniform_item = 0.0;
  bool sample_shrunk = false;
};

/// Alignment over a seeded sample of positive pairs plus user and item
/// uniformity over seeded samples of same-population pairs. The fixed seed
/// keeps the quantities comparable across epochs.
template <typename S>
AuMeasures measure_au(const Mat<S>& user_rep, const Mat<S>& item_rep,
                      const std::vector<Interaction>& positives, double t,
                      std::uint64_t seed, int num_pairs = 10000) {
  if (user_rep.rows() < 2 || item_rep.rows() < 2) {
    throw InvalidInputError("measure_au: need at least 2 users and 2 items");
  }
  AuMeasures out;
  // alignment over sampled positives
  {
    if (positives.empty()) throw InvalidInputError("measure_au: no positive pairs");
    Rng rng(seed);
    const int take = std::min<int>(num_pairs, static_cast<int>(positives.size()));
    out.sample_shrunk = take < num_pairs &&
                        static_cast<int>(positives.size()) < num_pairs;
    double acc = 0.0;
    for (int k = 0; k < take; ++k) {
      const auto& p = take == static_cast<int>(positives.size())
                          ? positives[k]
                          : positives[rng.index(positives.size())];
      acc += static_cast<double>(
          (user_rep.row(p.user) - item_rep.row(p.item)).squaredNorm());
    }
    out.align = acc / take;
  }
  auto uniformity = [&](const Mat<S>& reps, std::uint64_t salt) {
    bool shrunk = false;
    const auto pairs = sample_pairs(static_cast<int>(reps.rows()), num_pairs,
                                    seed ^ salt, &shrunk);
    out.sample_shrunk = out.sample_shrunk || shrunk;
    std::vector<double> expo;
    expo.reserve(pairs.size());
    for (const auto& [a, b] : pairs) {
      expo.push_back(-t * static_cast<double>((reps.row(a) - reps.row(b)).squaredNorm()));
    }
    return log_mean_exp(std::span<const double>(expo));
  };
  out.uniform_user = uniformity(user_rep, 0x9d5f);
  out.uniform_item = uniformity(item_rep, 0x3a77);
  return out;
}

/// Item uniformity alone, for the random-features contrast.
template <typename S>
double item_uniformity(const Mat<S>& item_rep, double t, std::uint64_t seed,
                       int num_pairs = 10000) {
  const auto pairs = sample_pairs(static_cast<int>(item_rep.rows()), num_pairs, seed);
  std::vector<double> expo;
  expo.reserve(pairs.size());
  for (const auto& [a, b] : pairs) {
    expo.push_back(-t * static_cast<double>((item_rep.row(a) - item_rep.row(b)).squaredNorm()));
  }
  return log_mean_exp(std::span<const double>(expo));
}

/// Calibrated item uniformity on the same sampled-pair protocol; phi comes
/// from the fused similarity source.
template <typename S>
double item_cal_uniformity(const Mat<S>& item_rep, const Mat<S>& fused, double t,
                           std::uint64_t seed, int num_pairs = 10000) {
  if (fused.rows() != item_rep.rows()) {
    throw ConfigError("item_cal_uniformity: fused feature rows disagree");
  }
  const auto pairs = sample_pairs(static_cast<int>(item_rep.rows()), num_pairs, seed);
  std::vector<double> expo;
  expo.reserve(pairs.size());
  for (const auto& [a, b] : pairs) {
    const double d2 = static_cast<double>((item_rep.row(a) - item_rep.row(b)).squaredNorm());
    const double phi = similarity<S>(fused.row(a), fused.row(b));
    expo.push_back(cal_uniform_pair_exponent(d2, phi, t));
  }
  return log_mean_exp(std::span<const double>(expo));
}

// ---------------------------------------------------------------------------
// Representation-geometry export
// ---------------------------------------------------------------------------

struct AngleExport {
  std::vector<double> angles;  // one arctan2 angle per item, radians
  bool degenerate = false;     // rank-deficient projection
};

/// Projects normalized item rows onto the top-2 right-singular directions,
/// renormalizes each projection to the unit circle and reports the
/// arctan2 angle per item.
template <typename S>
AngleExport export_angles(const Mat<S>& item_rep) {
  if (item_rep.rows() < 2) throw InvalidInputError("export_angles: need at least 2 items");
  const MatD n = l2_normalize_rows(item_rep.template cast<double>().eval());
  Eigen::BDCSVD<Eigen::MatrixXd> svd(n, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  AngleExport out;
  out.degenerate = sv.size() < 2 || sv(1) <= 1e-9 * std::max(1.0, sv(0));
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(n.cols(), 2);
  v.col(0) = svd.matrixV().col(0);
  if (sv.size() >= 2) v.col(1) = svd.matrixV().col(1);
  const Eigen::MatrixXd proj = n * v;
  out.angles.reserve(n.rows());
  for (Index i = 0; i < proj.rows(); ++i) {
    double x = proj(i, 0), y = proj(i, 1);
    const double norm = std::hypot(x, y);
    if (norm > 1e-12) {
      x /= norm;
      y /= norm;
    } else {
      x = 1.0;
      y = 0.0;
    }
    out.angles.push_back(std::atan2(y, x));
  }
  return out;
}

}  // namespace cm3
