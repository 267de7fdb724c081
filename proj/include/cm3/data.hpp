#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cm3/errors.hpp"
#include "cm3/graphs.hpp"
#include "cm3/numerics.hpp"

namespace cm3 {

enum class Split : std::uint8_t { train = 0, valid = 1, test = 2 };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw FormatError("unknown split label '" + s + "'");
}

struct Interaction {
  int user = 0;
  int item = 0;
};

/// In-memory dataset: dense internal ids, deduplicated interactions, one
/// feature matrix per modality aligned to internal item ids, and (after
/// splitting) one split label per interaction.
struct Dataset {
  std::vector<std::string> user_ids;  // internal -> external
  std::vector<std::string> item_ids;
  std::vector<Interaction> interactions;
  std::vector<Split> splits;  // empty until a split is applied
  std::vector<std::string> modality_names;
  std::vector<MatF> features;

  int num_users() const { return static_cast<int>(user_ids.size()); }
  int num_items() const { return static_cast<int>(item_ids.size()); }
  bool has_splits() const { return splits.size() == interactions.size(); }

  std::vector<std::pair<int, int>> edges(std::optional<Split> only = std::nullopt) const {
    std::vector<std::pair<int, int>> out;
    for (std::size_t k = 0; k < interactions.size(); ++k) {
      if (only && (!has_splits() || splits[k] != *only)) continue;
      out.emplace_back(interactions[k].user, interactions[k].item);
    }
    return out;
  }
};

struct SplitConfig {
  enum class Mode { warm, cold };
  Mode mode = Mode::warm;
  double train_ratio = 0.8;
  double valid_ratio = 0.1;
  double test_ratio = 0.1;
  double cold_item_fraction = 0.2;  // bisected into valid and test item sets
  std::uint64_t seed = 42;

  void validate() const {
    if (mode == Mode::warm) {
      if (!(train_ratio > 0.0 && valid_ratio > 0.0 && test_ratio > 0.0)) {
        throw ConfigError("SplitConfig: warm ratios must be positive");
      }
      if (std::abs(train_ratio + valid_ratio + test_ratio - 1.0) > 1e-9) {
        throw ConfigError("SplitConfig: warm ratios must sum to 1");
      }
    } else if (!(cold_item_fraction > 0.0 && cold_item_fraction < 1.0)) {
      throw ConfigError("SplitConfig: cold item fraction must lie in (0, 1)");
    }
  }
};

// ---------------------------------------------------------------------------
// Interactions CSV: `user_id,item_id[,timestamp]`, optional header,
// duplicates collapsed, timestamp ignored.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline bool looks_like_header(const std::vector<std::string>& fields) {
  for (const auto& f : fields) {
    std::string low;
    for (char c : f) low.push_back(static_cast<char>(std::tolower(c)));
    if (low == "user" || low == "user_id" || low == "item" || low == "item_id") return true;
  }
  return false;
}

}  // namespace detail

/// Raw (user, item) token pairs from a CSV file, deduplicated in first-seen
/// order.
inline std::vector<std::pair<std::string, std::string>> read_interactions_csv(
    const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open interactions file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> pairs;
  std::set<std::pair<std::string, std::string>> seen;
  std::string line;
  bool first = true;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (first) {
      first = false;
      if (detail::looks_like_header(fields)) continue;
    }
    if (fields.size() < 2 || fields[0].empty() || fields[1].empty()) {
      throw FormatError("malformed interaction at " + path + ":" +
                        std::to_string(lineno));
    }
    auto key = std::make_pair(fields[0], fields[1]);
    if (seen.insert(key).second) pairs.push_back(std::move(key));
  }
  return pairs;
}

/// Iteratively drops users and items with fewer than `min_count`
/// interactions until a fixpoint. Operates on provisional integer ids.
inline std::vector<std::pair<int, int>> five_core_filter(
    std::vector<std::pair<int, int>> interactions, int min_count = 5) {
  for (;;) {
    std::map<int, int> du, di;
    for (const auto& [u, i] : interactions) {
      du[u]++;
      di[i]++;
    }
    std::vector<std::pair<int, int>> kept;
    kept.reserve(interactions.size());
    for (const auto& e : interactions) {
      if (du[e.first] >= min_count && di[e.second] >= min_count) kept.push_back(e);
    }
    const bool stable = kept.size() == interactions.size();
    interactions = std::move(kept);
    if (stable) break;
  }
  if (interactions.empty()) {
    throw DataError("five_core_filter: no interactions survive the core filter");
  }
  return interactions;
}

// ---------------------------------------------------------------------------
// Feature files. Binary CM3F: magic "CM3F", u32 rows, u32 cols, f32
// little-endian row-major. CSV fallback: one row of floats per line.
// ---------------------------------------------------------------------------

inline void save_features(const std::string& path, const MatF& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write("CM3F", 4);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(float) * m.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline MatF load_features(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open feature file '" + path + "'");
    std::vector<std::vector<float>> rows;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<float> row;
      for (const auto& f : detail::split_csv_line(line)) {
        try {
          row.push_back(std::stof(f));
        } catch (const std::exception&) {
          throw FormatError("non-numeric feature value in '" + path + "'");
        }
      }
      if (!rows.empty() && row.size() != rows[0].size()) {
        throw FormatError("ragged feature rows in '" + path + "'");
      }
      rows.push_back(std::move(row));
    }
    if (rows.empty()) throw FormatError("empty feature file '" + path + "'");
    MatF m(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
    }
    return m;
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open feature file '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CM3F", 4) != 0) {
    throw FormatError("'" + path + "' is not a CM3F feature file");
  }
  const auto rows = detail::read_pod<std::uint32_t>(is);
  const auto cols = detail::read_pod<std::uint32_t>(is);
  MatF m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(float) * m.size()));
  if (!is) throw FormatError("truncated CM3F payload in '" + path + "'");
  return m;
}

// ---------------------------------------------------------------------------
// Dataset assembly and bundle layout. A bundle directory holds
// manifest.json, interactions.csv and one feature file per modality.
// ---------------------------------------------------------------------------

/// Assembles a Dataset from raw token pairs plus optional per-modality
/// features. When features are present, item tokens must be integers
/// indexing the feature rows; feature rows are then re-ordered to the dense
/// internal ids.
inline Dataset build_dataset(
    const std::vector<std::pair<std::string, std::string>>& pairs,
    std::vector<std::string> modality_names = {}, std::vector<MatF> raw_features = {},
    bool apply_five_core = false) {
  if (pairs.empty()) throw DataError("build_dataset: no interactions");
  if (modality_names.size() != raw_features.size()) {
    throw ConfigError("build_dataset: one name per feature matrix required");
  }

  // provisional ids in first-seen order
  std::map<std::string, int> umap, imap;
  std::vector<std::string> utok, itok;
  std::vector<std::pair<int, int>> edges;
  edges.reserve(pairs.size());
  for (const auto& [u, i] : pairs) {
    auto [uit, unew] = umap.try_emplace(u, static_cast<int>(utok.size()));
    if (unew) utok.push_back(u);
    auto [iit, inew] = imap.try_emplace(i, static_cast<int>(itok.size()));
    if (inew) itok.push_back(i);
    edges.emplace_back(uit->second, iit->second);
  }

  if (apply_five_core) edges = five_core_filter(std::move(edges));

  // compact to dense ids over the survivors, keeping first-seen order
  std::vector<int> unew(utok.size(), -1), inew(itok.size(), -1);
  Dataset ds;
  for (const auto& [u, i] : edges) {
    if (unew[u] < 0) {
      unew[u] = static_cast<int>(ds.user_ids.size());
      ds.user_ids.push_back(utok[u]);
    }
    if (inew[i] < 0) {
      inew[i] = static_cast<int>(ds.item_ids.size());
      ds.item_ids.push_back(itok[i]);
    }
    ds.interactions.push_back({unew[u], inew[i]});
  }

  // map feature rows (indexed by raw integer item token) onto internal ids
  for (std::size_t m = 0; m < raw_features.size(); ++m) {
    const MatF& raw = raw_features[m];
    MatF aligned(ds.num_items(), raw.cols());
    for (int i = 0; i < ds.num_items(); ++i) {
      const std::string& tok = ds.item_ids[i];
      int row = -1;
      try {
        row = std::stoi(tok);
      } catch (const std::exception&) {
        throw DataError("item id '" + tok + "' is not a feature row index");
      }
      if (row < 0 || row >= raw.rows()) {
        throw DataError("item id '" + tok + "' outside the feature row count " +
                        std::to_string(raw.rows()));
      }
      aligned.row(i) = raw.row(row);
    }
    ds.modality_names.push_back(modality_names[m]);
    ds.features.push_back(std::move(aligned));
  }
  return ds;
}

inline void save_bundle(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "'");
  {
    std::ofstream os(dir + "/interactions.csv");
    if (!os) throw IoError("cannot write '" + dir + "/interactions.csv'");
    os << "user_id,item_id\n";
    for (const auto& it : ds.interactions) {
      os << ds.user_ids[it.user] << "," << ds.item_ids[it.item] << "\n";
    }
  }
  nlohmann::json manifest;
  manifest["interactions"] = "interactions.csv";
  manifest["users"] = ds.num_users();
  manifest["items"] = ds.num_items();
  nlohmann::json feats = nlohmann::json::object();
  for (std::size_t m = 0; m < ds.modality_names.size(); ++m) {
    const std::string fname = ds.modality_names[m] + ".cm3f";
    save_features(dir + "/" + fname, ds.features[m]);
    feats[ds.modality_names[m]] = fname;
  }
  manifest["features"] = feats;
  std::ofstream os(dir + "/manifest.json");
  if (!os) throw IoError("cannot write '" + dir + "/manifest.json'");
  os << manifest.dump(2) << "\n";
}

/// Loads a bundle written by save_bundle (or by the synth command). Item
/// tokens in the bundle are internal ids already, so features line up by
/// construction.
inline Dataset load_bundle(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw IoError("cannot open '" + dir + "/manifest.json'");
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in '" + dir + "': " + e.what());
  }
  const auto pairs = read_interactions_csv(dir + "/" + manifest.value("interactions", "interactions.csv"));
  std::vector<std::string> names;
  std::vector<MatF> features;
  if (manifest.contains("features")) {
    for (const auto& [name, file] : manifest["features"].items()) {
      names.push_back(name);
      features.push_back(load_features(dir + "/" + file.get<std::string>()));
    }
  }
  Dataset ds = build_dataset(pairs, names, features, false);
  if (manifest.contains("items") && manifest["items"].get<int>() != ds.num_items()) {
    throw DataError("manifest item count " + std::to_string(manifest["items"].get<int>()) +
                    " does not match interactions (" + std::to_string(ds.num_items()) + ")");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

namespace detail {

/// Largest-remainder allocation of n into (train, valid, test) with floors
/// (3, 1, 1). Requires n >= 5.
inline std::array<int, 3> warm_counts(int n, const SplitConfig& cfg) {
  const double targets[3] = {cfg.train_ratio * n, cfg.valid_ratio * n, cfg.test_ratio * n};
  std::array<int, 3> counts{};
  double fracs[3];
  int used = 0;
  for (int k = 0; k < 3; ++k) {
    counts[k] = static_cast<int>(targets[k]);
    fracs[k] = targets[k] - counts[k];
    used += counts[k];
  }
  // hand out the remainder by largest fractional part; ties favour valid
  // then test so the floors are reached first
  const int rank[3] = {2, 0, 1};  // train last, valid first
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (fracs[a] != fracs[b]) return fracs[a] > fracs[b];
    return rank[a] < rank[b];
  });
  for (int r = 0; r < n - used; ++r) counts[order[r % 3]] += 1;
  // enforce floors by pulling from train
  for (int k : {1, 2}) {
    while (counts[k] < 1) {
      counts[0] -= 1;
      counts[k] += 1;
    }
  }
  while (counts[0] < 3) {
    int donor = counts[1] > 1 ? 1 : 2;
    counts[donor] -= 1;
    counts[0] += 1;
  }
  return counts;
}

}  // namespace detail

/// Per-user stratified 8:1:1 split with floors >=3 train, >=1 valid,
/// >=1 test. The five-core contract guarantees every user has at least 5
/// interactions; anything less is an internal error.
inline void warm_split(Dataset& ds, const SplitConfig& cfg) {
  cfg.validate();
  ds.splits.assign(ds.interactions.size(), Split::train);
  std::vector<std::vector<std::size_t>> per_user(ds.num_users());
  for (std::size_t k = 0; k < ds.interactions.size(); ++k) {
    per_user[ds.interactions[k].user].push_back(k);
  }
  Rng root(cfg.seed);
  for (int u = 0; u < ds.num_users(); ++u) {
    auto& rows = per_user[u];
    const int n = static_cast<int>(rows.size());
    if (n < 5) {
      throw InternalError("warm_split: user '" + ds.user_ids[u] + "' has " +
                          std::to_string(n) + " interactions; the core filter contract is violated");
    }
    Rng rng = root.fork(static_cast<std::uint64_t>(u));
    rng.shuffle(rows);
    const auto counts = detail::warm_counts(n, cfg);
    int pos = 0;
    for (int k = 0; k < counts[0]; ++k) ds.splits[rows[pos++]] = Split::train;
    for (int k = 0; k < counts[1]; ++k) ds.splits[rows[pos++]] = Split::valid;
    for (int k = 0; k < counts[2]; ++k) ds.splits[rows[pos++]] = Split::test;
  }
}

/// Item-level holdout: a fraction of items is sampled and bisected into
/// valid and test item sets; interactions are routed by their item. Held-out
/// items never appear in training interactions.
inline void cold_split(Dataset& ds, const SplitConfig& cfg) {
  cfg.validate();
  const int n_items = ds.num_items();
  const int held = static_cast<int>(std::lround(cfg.cold_item_fraction * n_items));
  const int n_valid = held / 2;
  const int n_test = held - n_valid;
  if (n_valid < 1 || n_test < 1) {
    throw ConfigError("cold_split: item pool too small for the holdout");
  }
  std::vector<int> order(n_items);
  for (int i = 0; i < n_items; ++i) order[i] = i;
  Rng rng(cfg.seed);
  rng.shuffle(order);
  std::vector<Split> item_split(n_items, Split::train);
  for (int k = 0; k < n_valid; ++k) item_split[order[k]] = Split::valid;
  for (int k = n_valid; k < held; ++k) item_split[order[k]] = Split::test;
  ds.splits.resize(ds.interactions.size());
  for (std::size_t k = 0; k < ds.interactions.size(); ++k) {
    ds.splits[k] = item_split[ds.interactions[k].item];
  }
}

inline void apply_split(Dataset& ds, const SplitConfig& cfg) {
  if (cfg.mode == SplitConfig::Mode::warm) {
    warm_split(ds, cfg);
  } else {
    cold_split(ds, cfg);
  }
}

/// Split manifest CSV: `user,item,split` with internal ids.
inline void save_splits(const std::string& path, const Dataset& ds) {
  if (!ds.has_splits()) throw InvalidInputError("save_splits: dataset has no splits");
  std::ofstream os(path);
  if (!os) throw IoError("cannot write split manifest '" + path + "'");
  os << "user,item,split\n";
  for (std::size_t k = 0; k < ds.interactions.size(); ++k) {
    os << ds.interactions[k].user << "," << ds.interactions[k].item << ","
       << to_string(ds.splits[k]) << "\n";
  }
}

inline void load_splits(const std::string& path, Dataset& ds) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open split manifest '" + path + "'");
  std::map<std::pair<int, int>, Split> assign;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (first) {
      first = false;
      if (detail::looks_like_header(fields)) continue;
    }
    if (fields.size() != 3) throw FormatError("malformed split manifest line in '" + path + "'");
    int u, i;
    try {
      u = std::stoi(fields[0]);
      i = std::stoi(fields[1]);
    } catch (const std::exception&) {
      throw FormatError("non-integer ids in split manifest '" + path + "'");
    }
    assign[{u, i}] = split_from_string(fields[2]);
  }
  ds.splits.resize(ds.interactions.size());
  for (std::size_t k = 0; k < ds.interactions.size(); ++k) {
    const auto it = assign.find({ds.interactions[k].user, ds.interactions[k].item});
    if (it == assign.end()) {
      throw DataError("split manifest misses interaction (" +
                      std::to_string(ds.interactions[k].user) + ", " +
                      std::to_string(ds.interactions[k].item) + ")");
    }
    ds.splits[k] = it->second;
  }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One epoch of training batches: a seeded shuffle of all train
/// interactions chunked into batches; the last short batch is kept.
inline std::vector<std::vector<Interaction>> epoch_batches(const Dataset& ds,
                                                           int batch_size, Rng rng) {
  if (batch_size < 2) {
    throw ConfigError("epoch_batches: batch size must be >= 2 (uniformity needs pairs)");
  }
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < ds.interactions.size(); ++k) {
    if (!ds.has_splits() || ds.splits[k] == Split::train) order.push_back(k);
  }
  if (order.empty()) throw DataError("epoch_batches: train split is empty");
  rng.shuffle(order);
  std::vector<std::vector<Interaction>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<Interaction> batch;
    for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k) {
      batch.push_back(ds.interactions[order[k]]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

/// Ground-truth item sets per user for one phase.
inline std::vector<std::vector<int>> truth_by_user(const Dataset& ds, Split phase) {
  if (!ds.has_splits()) throw InvalidInputError("truth_by_user: dataset has no splits");
  std::vector<std::vector<int>> truth(ds.num_users());
  for (std::size_t k = 0; k < ds.interactions.size(); ++k) {
    if (ds.splits[k] == phase) truth[ds.interactions[k].user].push_back(ds.interactions[k].item);
  }
  return truth;
}

}  // namespace cm3
