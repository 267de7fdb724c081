#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cm3/errors.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

/// Bipartite user-item graph with the symmetric-normalized adjacency stored
/// as the user->item block and its transpose. Coefficient for edge (u, i)
/// is 1/sqrt(deg(u) * deg(i)); zero degrees are clamped to 1 so cold nodes
/// stay well defined.
template <typename S>
struct InteractionGraph {
  int num_users = 0;
  int num_items = 0;
  std::vector<std::pair<int, int>> edges;  // deduplicated, sorted by (u, i)
  std::vector<int> user_degree;
  std::vector<int> item_degree;
  SpMat<S> adj_ui;  // |U| x |I|
  SpMat<S> adj_iu;  // |I| x |U|
};

template <typename S>
InteractionGraph<S> build_interaction_graph(std::span<const std::pair<int, int>> edges,
                                            int num_users, int num_items) {
  InteractionGraph<S> g;
  g.num_users = num_users;
  g.num_items = num_items;
  g.edges.assign(edges.begin(), edges.end());
  for (const auto& [u, i] : g.edges) {
    if (u < 0 || u >= num_users || i < 0 || i >= num_items) {
      throw DataError("build_interaction_graph: edge (" + std::to_string(u) + ", " +
                      std::to_string(i) + ") out of range");
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());

  g.user_degree.assign(num_users, 0);
  g.item_degree.assign(num_items, 0);
  for (const auto& [u, i] : g.edges) {
    g.user_degree[u] += 1;
    g.item_degree[i] += 1;
  }

  std::vector<Eigen::Triplet<S>> tri;
  tri.reserve(g.edges.size());
  for (const auto& [u, i] : g.edges) {
    const double du = std::max(g.user_degree[u], 1);
    const double di = std::max(g.item_degree[i], 1);
    tri.emplace_back(u, i, static_cast<S>(1.0 / std::sqrt(du * di)));
  }
  g.adj_ui.resize(num_users, num_items);
  g.adj_ui.setFromTriplets(tri.begin(), tri.end());
  g.adj_ui.makeCompressed();
  g.adj_iu = g.adj_ui.transpose();
  g.adj_iu.makeCompressed();
  return g;
}

/// LightGCN propagation: alternate neighbor aggregation for `layers` hops,
/// then sum-readout over layers 0..layers.
template <typename S>
std::pair<Mat<S>, Mat<S>> propagate_ui(const InteractionGraph<S>& g,
                                       const Mat<S>& user_emb, const Mat<S>& item_emb,
                                       int layers) {
  if (user_emb.cols() != item_emb.cols()) {
    throw ConfigError("propagate_ui: embedding widths differ");
  }
  if (user_emb.rows() != g.num_users || item_emb.rows() != g.num_items) {
    throw ConfigError("propagate_ui: embedding row counts do not match the graph");
  }
  Mat<S> acc_u = user_emb;
  Mat<S> acc_i = item_emb;
  Mat<S> cur_u = user_emb;
  Mat<S> cur_i = item_emb;
  for (int l = 0; l < layers; ++l) {
    Mat<S> next_u = spmm(g.adj_ui, cur_i);
    Mat<S> next_i = spmm(g.adj_iu, cur_u);
    acc_u += next_u;
    acc_i += next_i;
    cur_u = std::move(next_u);
    cur_i = std::move(next_i);
  }
  return {std::move(acc_u), std::move(acc_i)};
}

/// Frozen kNN item-item graph over multimodal features.
template <typename S>
struct ItemItemGraph {
  SpMat<S> weights;  // |I| x |I|, symmetric-normalized, entries >= 0
  int knn_k = 0;
};

/// Per modality: cosine similarities, top-k neighbors per row (self
/// excluded, ties to the lower index), binarized, symmetrized by edge
/// union, D^{-1/2} A D^{-1/2} normalized; modalities combined by weights
/// normalized to sum 1.
template <typename S>
ItemItemGraph<S> build_item_item_graph(const std::vector<const Mat<S>*>& modality_features,
                                       int knn_k, std::vector<double> weights = {}) {
  if (modality_features.empty()) {
    throw InvalidInputError("build_item_item_graph: no modality features");
  }
  const Index n = modality_features[0]->rows();
  if (knn_k < 1) throw ConfigError("build_item_item_graph: knn_k must be >= 1");
  if (knn_k >= n) {
    throw ConfigError("build_item_item_graph: knn_k must be smaller than the item count");
  }
  if (weights.empty()) weights.assign(modality_features.size(), 1.0);
  if (weights.size() != modality_features.size()) {
    throw ConfigError("build_item_item_graph: one weight per modality required");
  }
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(wsum > 0.0)) throw ConfigError("build_item_item_graph: weights must sum to > 0");

  SpMat<S> combined(n, n);
  for (std::size_t m = 0; m < modality_features.size(); ++m) {
    const Mat<S>& feat = *modality_features[m];
    if (feat.rows() != n) {
      throw ConfigError("build_item_item_graph: modality row counts disagree");
    }
    const Mat<S> norm = l2_normalize_rows(feat);

    // directed top-k per row, self excluded
    std::vector<std::vector<int>> nbrs(static_cast<std::size_t>(n));
    std::vector<std::pair<S, int>> cand(static_cast<std::size_t>(n) - 1);
    for (Index i = 0; i < n; ++i) {
      const Vec<S> sims = norm * norm.row(i).transpose();
      std::size_t c = 0;
      for (Index j = 0; j < n; ++j) {
        if (j == i) continue;
        cand[c++] = {sims(j), static_cast<int>(j)};
      }
      std::partial_sort(cand.begin(), cand.begin() + knn_k, cand.end(),
                        [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                        });
      for (int k = 0; k < knn_k; ++k) nbrs[i].push_back(cand[k].second);
    }

    // symmetrize by union, then degree-normalize
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      for (int j : nbrs[i]) {
        adj[i].push_back(j);
        adj[j].push_back(static_cast<int>(i));
      }
    }
    std::vector<Eigen::Triplet<S>> tri;
    std::vector<int> degree(static_cast<std::size_t>(n), 0);
    for (Index i = 0; i < n; ++i) {
      auto& a = adj[i];
      std::sort(a.begin(), a.end());
      a.erase(std::unique(a.begin(), a.end()), a.end());
      degree[i] = static_cast<int>(a.size());
    }
    const double scale = weights[m] / wsum;
    for (Index i = 0; i < n; ++i) {
      for (int j : adj[i]) {
        const double di = std::max(degree[i], 1);
        const double dj = std::max(degree[j], 1);
        tri.emplace_back(static_cast<int>(i), j,
                         static_cast<S>(scale / std::sqrt(di * dj)));
      }
    }
    SpMat<S> sm(n, n);
    sm.setFromTriplets(tri.begin(), tri.end());
    combined = (m == 0) ? sm : SpMat<S>(combined + sm);
  }
  combined.makeCompressed();
  ItemItemGraph<S> g;
  g.weights = std::move(combined);
  g.knn_k = knn_k;
  return g;
}

/// Residual propagation on the item-item graph: S^layers * X + X.
/// layers = 0 is the identity (no residual doubling).
template <typename S>
Mat<S> propagate_ii(const ItemItemGraph<S>& g, const Mat<S>& item_emb, int layers) {
  if (g.weights.cols() != item_emb.rows()) {
    throw ConfigError("propagate_ii: graph size does not match embedding rows");
  }
  if (layers == 0) return item_emb;
  Mat<S> cur = item_emb;
  for (int l = 0; l < layers; ++l) cur = spmm(g.weights, cur);
  return cur + item_emb;
}

// ---------------------------------------------------------------------------
// Graph cache file: magic "CM3S", u32 rows, u32 cols, u64 nnz, then CSR
// arrays (u64 row pointers, u32 column indices, f32 values), little-endian.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("unexpected end of file");
  return v;
}

}  // namespace detail

inline void save_item_graph(const std::string& path, const ItemItemGraph<float>& g) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write("CM3S", 4);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(g.weights.rows()));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(g.weights.cols()));
  detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(g.weights.nonZeros()));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(g.knn_k));
  for (Index r = 0; r <= g.weights.rows(); ++r) {
    detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(g.weights.outerIndexPtr()[r]));
  }
  for (Index k = 0; k < g.weights.nonZeros(); ++k) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(g.weights.innerIndexPtr()[k]));
  }
  for (Index k = 0; k < g.weights.nonZeros(); ++k) {
    detail::write_pod<float>(os, g.weights.valuePtr()[k]);
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline ItemItemGraph<float> load_item_graph(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CM3S", 4) != 0) {
    throw FormatError("'" + path + "' is not a CM3S graph cache");
  }
  const auto rows = detail::read_pod<std::uint32_t>(is);
  const auto cols = detail::read_pod<std::uint32_t>(is);
  const auto nnz = detail::read_pod<std::uint64_t>(is);
  const auto knn_k = detail::read_pod<std::uint32_t>(is);
  std::vector<std::uint64_t> indptr(rows + 1);
  for (auto& v : indptr) v = detail::read_pod<std::uint64_t>(is);
  std::vector<std::uint32_t> indices(nnz);
  for (auto& v : indices) v = detail::read_pod<std::uint32_t>(is);
  std::vector<float> values(nnz);
  for (auto& v : values) v = detail::read_pod<float>(is);
  if (indptr.back() != nnz) throw FormatError("CM3S row pointers inconsistent with nnz");
  std::vector<Eigen::Triplet<float>> tri;
  tri.reserve(nnz);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint64_t k = indptr[r]; k < indptr[r + 1]; ++k) {
      if (indices[k] >= cols) throw FormatError("CM3S column index out of range");
      tri.emplace_back(static_cast<int>(r), static_cast<int>(indices[k]), values[k]);
    }
  }
  ItemItemGraph<float> g;
  g.weights.resize(rows, cols);
  g.weights.setFromTriplets(tri.begin(), tri.end());
  g.weights.makeCompressed();
  g.knn_k = static_cast<int>(knn_k);
  return g;
}

}  // namespace cm3
