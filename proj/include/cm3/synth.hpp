#pragma once

#include <set>
#include <string>
#include <vector>

#include "cm3/data.hpp"
#include "cm3/errors.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

/// Block-structured synthetic dataset: users of block b prefer items of
/// block b with probability 1 - noise, and each modality's feature rows are
/// unit-normalized block centroids plus Gaussian noise.
struct SynthConfig {
  int users = 200;
  int items = 100;
  int blocks = 4;
  double noise = 0.1;
  std::uint64_t seed = 7;
  int min_interactions = 8;
  int max_interactions = 16;
  std::vector<Index> feature_dims{32, 48};
  std::vector<std::string> modality_names{"image", "text"};

  void validate() const {
    if (blocks < 2) throw ConfigError("synth: blocks must be >= 2");
    if (users < 5 * blocks || items < 5 * blocks) {
      throw ConfigError("synth: users and items must each be >= 5 * blocks");
    }
    if (noise < 0.0 || noise > 1.0) throw ConfigError("synth: noise must lie in [0, 1]");
    if (min_interactions < 5 || max_interactions < min_interactions) {
      throw ConfigError("synth: interaction counts must satisfy 5 <= min <= max");
    }
    if (max_interactions > items / blocks) {
      throw ConfigError("synth: max interactions exceed the per-block item pool");
    }
    if (feature_dims.size() != modality_names.size() || feature_dims.empty()) {
      throw ConfigError("synth: one feature dim per modality name required");
    }
  }
};

inline Dataset make_synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  auto user_block = [&](int u) { return static_cast<int>(static_cast<long long>(u) * cfg.blocks / cfg.users); };
  auto item_block = [&](int i) { return static_cast<int>(static_cast<long long>(i) * cfg.blocks / cfg.items); };
  std::vector<std::vector<int>> block_items(cfg.blocks);
  for (int i = 0; i < cfg.items; ++i) block_items[item_block(i)].push_back(i);

  std::vector<std::pair<std::string, std::string>> pairs;
  for (int u = 0; u < cfg.users; ++u) {
    const int b = user_block(u);
    const int n = cfg.min_interactions +
                  static_cast<int>(rng.index(cfg.max_interactions - cfg.min_interactions + 1));
    std::set<int> chosen;
    int attempts = 0;
    while (static_cast<int>(chosen.size()) < n && attempts < 100 * n) {
      ++attempts;
      int item;
      if (cfg.noise > 0.0 && rng.uniform() < cfg.noise) {
        item = static_cast<int>(rng.index(cfg.items));       // leak anywhere
        if (item_block(item) == b) continue;                 // a true cross-block pick
      } else {
        item = block_items[b][rng.index(block_items[b].size())];
      }
      chosen.insert(item);
    }
    for (int i : block_items[b]) {
      if (static_cast<int>(chosen.size()) >= n) break;
      chosen.insert(i);
    }
    for (int i : chosen) pairs.emplace_back(std::to_string(u), std::to_string(i));
  }

  std::vector<MatF> features;
  for (std::size_t m = 0; m < cfg.feature_dims.size(); ++m) {
    const Index d = cfg.feature_dims[m];
    MatF centroids(cfg.blocks, d);
    for (Index r = 0; r < centroids.rows(); ++r) {
      for (Index c = 0; c < d; ++c) centroids(r, c) = static_cast<float>(rng.normal());
    }
    MatF feat(cfg.items, d);
    for (int i = 0; i < cfg.items; ++i) {
      for (Index c = 0; c < d; ++c) {
        feat(i, c) = centroids(item_block(i), c) +
                     static_cast<float>(cfg.noise * rng.normal());
      }
    }
    features.push_back(l2_normalize_rows(feat));
  }
  return build_dataset(pairs, cfg.modality_names, features, false);
}

/// Generates and writes the bundle (interactions CSV, one CM3F per
/// modality, manifest).
inline Dataset write_synth_bundle(const std::string& dir, const SynthConfig& cfg) {
  Dataset ds = make_synth_dataset(cfg);
  save_bundle(dir, ds);
  return ds;
}

}  // namespace cm3
