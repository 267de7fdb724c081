// Command-line front end: ingest, split, train, grid, eval, diagnose,
// synth and fuse-check. Every command is deterministic for a fixed seed
// and never mutates its input files.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "cm3/data.hpp"
#include "cm3/errors.hpp"
#include "cm3/eval.hpp"
#include "cm3/fusion.hpp"
#include "cm3/model.hpp"
#include "cm3/synth.hpp"
#include "cm3/trainer.hpp"

namespace {

using namespace cm3;

constexpr int kCheckFailureExit = 10;

struct CheckFailure {
  std::string message;
};

// ---------------------------------------------------------------------------
// shared option bundles
// ---------------------------------------------------------------------------

struct DataOpts {
  std::string data;
  std::vector<std::string> features;  // modality=path
  bool five_core = false;
};

void add_data_opts(CLI::App* cmd, DataOpts& o, bool with_five_core = true) {
  cmd->add_option("--data", o.data, "Bundle directory or raw interactions CSV")->required();
  cmd->add_option("--features", o.features,
                  "Feature file per modality as <modality>=<path> (repeatable)");
  if (with_five_core) {
    cmd->add_flag("--five-core", o.five_core, "Apply iterative 5-core filtering");
  }
}

Dataset load_input(const DataOpts& o) {
  namespace fs = std::filesystem;
  if (fs::exists(fs::path(o.data) / "manifest.json")) {
    if (!o.features.empty()) {
      throw ConfigError("--features is only valid with a raw CSV input");
    }
    if (o.five_core) {
      throw ConfigError("--five-core applies at ingest time, not to bundles");
    }
    return load_bundle(o.data);
  }
  std::vector<std::string> names;
  std::vector<MatF> feats;
  for (const auto& kv : o.features) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == kv.size()) {
      throw ConfigError("--features expects <modality>=<path>, got '" + kv + "'");
    }
    names.push_back(kv.substr(0, eq));
    feats.push_back(load_features(kv.substr(eq + 1)));
  }
  return build_dataset(read_interactions_csv(o.data), names, feats, o.five_core);
}

struct SplitOpts {
  std::string mode = "warm";
  std::string splits_file;
};

void add_split_opts(CLI::App* cmd, SplitOpts& o) {
  cmd->add_option("--mode", o.mode, "Split mode: warm or cold")
      ->check(CLI::IsMember({"warm", "cold"}));
  cmd->add_option("--splits", o.splits_file, "Reuse an existing split manifest CSV");
}

void resolve_splits(Dataset& ds, const SplitOpts& o, std::uint64_t seed,
                    const std::string& out_dir) {
  if (!o.splits_file.empty()) {
    load_splits(o.splits_file, ds);
    return;
  }
  SplitConfig cfg;
  cfg.mode = o.mode == "cold" ? SplitConfig::Mode::cold : SplitConfig::Mode::warm;
  cfg.seed = seed;
  apply_split(ds, cfg);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_splits(out_dir + "/splits.csv", ds);
  }
}

struct HyperOpts {
  double gamma = 1.0;
  double t = 1.0;
  double alpha = 1.0;
  Index d = 64;
  Index d1 = 256;
  int layers_ui = 2;
  int layers_ii = 1;
  int knn_k = 10;
  int batch = 2048;
  int epochs = 100;
  int patience = 10;
  double lr = 1e-3;
  std::uint64_t seed = 42;
  std::string loss = "calibrated";
  std::string fusion = "slerp";
  std::string lambda_policy = "sample";
  double lambda = 0.5;
  bool normalize = true;
  std::string phi_cache = "step";
  int eval_k = 20;
  bool no_timing = false;
  std::uint64_t random_features = 0;
};

void add_hyper_opts(CLI::App* cmd, HyperOpts& o) {
  // --config is handled by a pre-parse pass (apply_config_file); registering
  // it here only documents the flag and consumes the value
  static std::string config_path_sink;
  cmd->add_option("--config", config_path_sink,
                  "Key-value config file; explicit flags take precedence");
  cmd->add_option("--gamma", o.gamma, "Alignment-uniformity trade-off");
  cmd->add_option("--t", o.t, "Uniformity temperature");
  cmd->add_option("--alpha", o.alpha, "Beta(alpha, alpha) mix parameter");
  cmd->add_option("--d", o.d, "Latent width per block");
  cmd->add_option("--d1", o.d1, "Projector hidden width");
  cmd->add_option("--layers-ui", o.layers_ui, "User-item propagation layers");
  cmd->add_option("--layers-ii", o.layers_ii, "Item-item propagation layers");
  cmd->add_option("--knn-k", o.knn_k, "Item graph neighbours per row");
  cmd->add_option("--batch", o.batch, "Training batch size");
  cmd->add_option("--epochs", o.epochs, "Epoch cap");
  cmd->add_option("--patience", o.patience, "Early-stopping patience");
  cmd->add_option("--lr", o.lr, "Adam learning rate");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_option("--loss", o.loss, "Item uniformity variant")
      ->check(CLI::IsMember({"standard", "calibrated"}));
  cmd->add_option("--fusion", o.fusion, "Modality fusion variant")
      ->check(CLI::IsMember({"slerp", "linear", "none"}));
  cmd->add_option("--lambda-policy", o.lambda_policy, "Mix coefficient policy")
      ->check(CLI::IsMember({"sample", "fixed"}));
  cmd->add_option("--lambda", o.lambda, "Fixed mix coefficient (with --lambda-policy fixed)");
  cmd->add_flag("--normalize,!--no-normalize", o.normalize,
                "L2-normalize final representations for loss and scoring");
  cmd->add_option("--phi-cache", o.phi_cache, "Similarity-score cadence: step or epoch")
      ->check(CLI::IsMember({"step", "epoch"}));
  cmd->add_option("--eval-k", o.eval_k, "Recall cutoff for model selection");
  cmd->add_flag("--no-timing", o.no_timing, "Zero the seconds column for byte-stable output");
  cmd->add_option("--random-features", o.random_features,
                  "Nonzero seed: replace features with random noise of equal dims");
}

/// Seeds hyperparameter defaults from a plain key=value file; keys mirror
/// the long flag names. Called before CLI11 parses, so explicit flags
/// override the file.
void apply_config_file(const std::string& path, HyperOpts& o, SplitOpts& s) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) line.pop_back();
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + " is not key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "mode") s.mode = val;
      else if (key == "gamma") o.gamma = std::stod(val);
      else if (key == "t") o.t = std::stod(val);
      else if (key == "alpha") o.alpha = std::stod(val);
      else if (key == "d") o.d = std::stoll(val);
      else if (key == "d1") o.d1 = std::stoll(val);
      else if (key == "layers-ui") o.layers_ui = std::stoi(val);
      else if (key == "layers-ii") o.layers_ii = std::stoi(val);
      else if (key == "knn-k") o.knn_k = std::stoi(val);
      else if (key == "batch") o.batch = std::stoi(val);
      else if (key == "epochs") o.epochs = std::stoi(val);
      else if (key == "patience") o.patience = std::stoi(val);
      else if (key == "lr") o.lr = std::stod(val);
      else if (key == "seed") o.seed = std::stoull(val);
      else if (key == "loss") o.loss = val;
      else if (key == "fusion") o.fusion = val;
      else if (key == "lambda-policy") o.lambda_policy = val;
      else if (key == "lambda") o.lambda = std::stod(val);
      else if (key == "normalize") o.normalize = (val == "true" || val == "1");
      else if (key == "phi-cache") o.phi_cache = val;
      else if (key == "eval-k") o.eval_k = std::stoi(val);
      else if (key == "random-features") o.random_features = std::stoull(val);
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("bad value for config key '" + key + "': '" + val + "'");
    }
  }
}

/// Pre-parse scan for --config so the file can seed defaults.
std::string find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

TrainConfig to_train_config(const HyperOpts& o) {
  TrainConfig cfg;
  cfg.max_epochs = o.epochs;
  cfg.patience = o.patience;
  cfg.lr = o.lr;
  cfg.seed = o.seed;
  cfg.knn_k = o.knn_k;
  cfg.eval_k = o.eval_k;
  cfg.timing = !o.no_timing;
  cfg.random_features_seed = o.random_features;
  cfg.loss.t = o.t;
  cfg.loss.gamma = o.gamma;
  cfg.loss.batch_size = o.batch;
  cfg.loss.kind = loss_kind_from_string(o.loss);
  cfg.loss.phi_cache = o.phi_cache == "epoch" ? PhiCache::Epoch : PhiCache::Step;
  cfg.fusion.alpha = o.alpha;
  cfg.fusion.lambda_policy =
      o.lambda_policy == "fixed" ? LambdaPolicy::Fixed : LambdaPolicy::SamplePerStep;
  cfg.fusion.fixed_lambda = o.lambda;
  cfg.model.d = o.d;
  cfg.model.hidden_dim = o.d1;
  cfg.model.layers_ui = o.layers_ui;
  cfg.model.layers_ii = o.layers_ii;
  cfg.model.normalize_reps = o.normalize;
  cfg.model.fusion = fusion_mode_from_string(o.fusion);
  return cfg;
}

std::vector<double> parse_gamma_grid(const std::string& spec) {
  std::vector<double> grid;
  if (spec.empty()) return grid;
  // either "a,b,c" or "start:end:step"
  if (spec.find(':') != std::string::npos) {
    double start, end, step;
    if (std::sscanf(spec.c_str(), "%lf:%lf:%lf", &start, &end, &step) != 3 || step <= 0) {
      throw ConfigError("--gamma-grid expects start:end:step or a comma list");
    }
    for (double g = start; g <= end + 1e-12; g += step) grid.push_back(g);
    return grid;
  }
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      grid.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("--gamma-grid has a non-numeric entry '" + tok + "'");
    }
  }
  return grid;
}

void write_effective_config(const std::string& path, const HyperOpts& o,
                            const std::string& mode) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path + "'");
  os << std::setprecision(10);
  os << "mode=" << mode << "\n";
  os << "gamma=" << o.gamma << "\n";
  os << "t=" << o.t << "\n";
  os << "alpha=" << o.alpha << "\n";
  os << "d=" << o.d << "\n";
  os << "d1=" << o.d1 << "\n";
  os << "layers-ui=" << o.layers_ui << "\n";
  os << "layers-ii=" << o.layers_ii << "\n";
  os << "knn-k=" << o.knn_k << "\n";
  os << "batch=" << o.batch << "\n";
  os << "epochs=" << o.epochs << "\n";
  os << "patience=" << o.patience << "\n";
  os << "lr=" << o.lr << "\n";
  os << "seed=" << o.seed << "\n";
  os << "loss=" << o.loss << "\n";
  os << "fusion=" << o.fusion << "\n";
  os << "lambda-policy=" << o.lambda_policy << "\n";
  os << "lambda=" << o.lambda << "\n";
  os << "normalize=" << (o.normalize ? "true" : "false") << "\n";
  os << "phi-cache=" << o.phi_cache << "\n";
  os << "eval-k=" << o.eval_k << "\n";
}

Checkpoint make_checkpoint(const TrainResult& res, const TrainConfig& cfg,
                           const Dataset& ds) {
  Checkpoint ckpt;
  ckpt.params = res.params;
  ckpt.model = res.model_cfg;
  ckpt.t = cfg.loss.t;
  ckpt.gamma = cfg.loss.gamma;
  ckpt.alpha = cfg.fusion.alpha;
  ckpt.singular_tol = cfg.fusion.singular_tol;
  ckpt.loss_kind = cfg.loss.kind;
  ckpt.modality_names = ds.modality_names;
  ckpt.seed = cfg.seed;
  ckpt.knn_k = cfg.knn_k;
  ckpt.random_features_seed = cfg.random_features_seed;
  return ckpt;
}

/// Rebuilds graphs and the forward pass for a stored checkpoint.
ForwardResult<float> checkpoint_forward(Checkpoint& ckpt, const Dataset& ds) {
  if (ds.features.size() != ckpt.model.modality_dims.size()) {
    throw DataError("checkpoint expects " + std::to_string(ckpt.model.modality_dims.size()) +
                    " modalities, dataset has " + std::to_string(ds.features.size()));
  }
  TrainConfig feat_cfg;
  feat_cfg.random_features_seed = ckpt.random_features_seed;
  const std::vector<MatF> features = detail::training_features(ds, feat_cfg);
  for (std::size_t m = 0; m < features.size(); ++m) {
    if (features[m].cols() != ckpt.model.modality_dims[m]) {
      throw DataError("modality width mismatch against the checkpoint");
    }
  }
  const auto edges = ds.edges(Split::train);
  const auto ig = build_interaction_graph<float>(edges, ds.num_users(), ds.num_items());
  std::vector<const MatF*> fptr;
  for (const auto& f : features) fptr.push_back(&f);
  const auto iig =
      build_item_item_graph<float>(fptr, std::min(ckpt.knn_k, ds.num_items() - 1));
  return forward(ckpt.params, ig, iig, features, ckpt.model, 0.5f,
                 static_cast<float>(ckpt.singular_tol));
}

void require_out(const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out + "'");
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_synth(const SynthConfig& cfg, const std::string& out) {
  require_out(out);
  const Dataset ds = write_synth_bundle(out, cfg);
  std::cout << "synth: users=" << ds.num_users() << " items=" << ds.num_items()
            << " interactions=" << ds.interactions.size() << " -> " << out << "\n";
  return 0;
}

int cmd_ingest(const DataOpts& data, const std::string& out) {
  require_out(out);
  const Dataset ds = load_input(data);
  save_bundle(out, ds);
  std::cout << "ingest: users=" << ds.num_users() << " items=" << ds.num_items()
            << " interactions=" << ds.interactions.size() << " -> " << out << "\n";
  return 0;
}

int cmd_split(const DataOpts& data, const SplitOpts& split, std::uint64_t seed,
              const std::string& out) {
  require_out(out);
  Dataset ds = load_input(data);
  resolve_splits(ds, split, seed, out);
  if (!split.splits_file.empty()) save_splits(out + "/splits.csv", ds);
  std::array<int, 3> counts{};
  for (auto s : ds.splits) counts[static_cast<int>(s)]++;
  std::cout << "split: train=" << counts[0] << " valid=" << counts[1]
            << " test=" << counts[2] << " -> " << out << "/splits.csv\n";
  return 0;
}

int cmd_train(const DataOpts& data, const SplitOpts& split, const HyperOpts& hyper,
              const std::string& gamma_grid, const std::string& out, bool grid_mode) {
  require_out(out);
  Dataset ds = load_input(data);
  resolve_splits(ds, split, hyper.seed, out);
  TrainConfig cfg = to_train_config(hyper);
  write_effective_config(out + "/run_config.txt", hyper, split.mode);

  TrainResult result;
  if (grid_mode) {
    cfg.gamma_grid = parse_gamma_grid(gamma_grid);
    GridResult grid = grid_search(ds, cfg);
    write_grid_csv(out + "/grid.csv", grid.rows);
    result = std::move(grid.best);
    cfg.loss.gamma = grid.best_gamma;
    std::cout << "grid: best gamma=" << grid.best_gamma << "\n";
  } else {
    if (!gamma_grid.empty()) {
      throw ConfigError("--gamma-grid belongs to the grid command");
    }
    result = train(ds, cfg);
  }
  write_diagnostics_csv(out + "/diagnostics.csv", result.diagnostics);
  save_checkpoint(out + "/checkpoint.cm3c", make_checkpoint(result, cfg, ds));
  if (result.aborted) {
    std::cerr << "warning: run aborted on a non-finite loss; checkpoint holds the "
                 "last good state\n";
  }
  std::cout << "train: epochs=" << result.epochs_run << " best_epoch=" << result.best_epoch
            << " val_recall" << cfg.eval_k << "=" << std::setprecision(6)
            << result.best_metric << " -> " << out << "\n";
  return 0;
}

int cmd_eval(const DataOpts& data, const SplitOpts& split, const std::string& ckpt_path,
             const std::string& phase, std::uint64_t seed, const std::string& out) {
  require_out(out);
  Dataset ds = load_input(data);
  resolve_splits(ds, split, seed, "");
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto fwd = checkpoint_forward(ckpt, ds);
  const Split ph = split_from_string(phase);
  const auto res = evaluate(fwd.user_rep, fwd.item_rep, ds, ph, {10, 20});
  std::ofstream os(out + "/metrics.csv");
  if (!os) throw IoError("cannot write metrics CSV");
  os << std::setprecision(10) << "phase,k,recall,ndcg\n";
  for (std::size_t j = 0; j < res.ks.size(); ++j) {
    os << phase << "," << res.ks[j] << "," << res.recall[j] << "," << res.ndcg[j] << "\n";
  }
  std::cout << std::setprecision(6);
  for (std::size_t j = 0; j < res.ks.size(); ++j) {
    std::cout << "eval " << phase << ": R@" << res.ks[j] << "=" << res.recall[j]
              << " N@" << res.ks[j] << "=" << res.ndcg[j] << "\n";
  }
  return 0;
}

int cmd_diagnose(const DataOpts& data, const SplitOpts& split, const std::string& ckpt_path,
                 const std::string& compare_path, double t, int pairs,
                 std::uint64_t seed, const std::string& out) {
  require_out(out);
  Dataset ds = load_input(data);
  resolve_splits(ds, split, seed, "");
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto fwd = checkpoint_forward(ckpt, ds);

  const auto au = measure_au(fwd.user_rep, fwd.item_rep, ds.interactions, t, seed, pairs);
  if (au.sample_shrunk) {
    std::cerr << "warning: pair population smaller than requested sample; using all pairs\n";
  }
  TrainConfig feat_cfg;
  feat_cfg.random_features_seed = ckpt.random_features_seed;
  const auto features = detail::training_features(ds, feat_cfg);
  const MatF fused = fused_features(features, ckpt.params, ckpt.model, 0.5f,
                                    static_cast<float>(ckpt.singular_tol));
  const double cal = item_cal_uniformity(fwd.item_rep, fused, t, seed, pairs);
  {
    std::ofstream os(out + "/au.csv");
    if (!os) throw IoError("cannot write au.csv");
    os << std::setprecision(10)
       << "l_align,l_uniform_user,l_uniform_item,l_cal_uniform_item\n";
    os << au.align << "," << au.uniform_user << "," << au.uniform_item << "," << cal << "\n";
  }
  {
    const auto angles = export_angles(fwd.item_rep);
    if (angles.degenerate) {
      std::cerr << "warning: item representations are rank-deficient; angles repeat\n";
    }
    std::ofstream os(out + "/angles.csv");
    if (!os) throw IoError("cannot write angles.csv");
    os << std::setprecision(10) << "item_id,angle_rad\n";
    for (std::size_t i = 0; i < angles.angles.size(); ++i) {
      os << ds.item_ids[i] << "," << angles.angles[i] << "\n";
    }
  }
  if (!compare_path.empty()) {
    Checkpoint other = load_checkpoint(compare_path);
    const auto other_fwd = checkpoint_forward(other, ds);
    const double u_primary = item_uniformity(fwd.item_rep, t, seed, pairs);
    const double u_compare = item_uniformity(other_fwd.item_rep, t, seed, pairs);
    std::ofstream os(out + "/uniformity_compare.csv");
    if (!os) throw IoError("cannot write uniformity_compare.csv");
    os << std::setprecision(10) << "condition,l_uniform_item\n";
    os << "primary," << u_primary << "\n";
    os << "compare," << u_compare << "\n";
    std::cout << "diagnose: uniformity primary=" << u_primary
              << " compare=" << u_compare << "\n";
  }
  std::cout << std::setprecision(6) << "diagnose: l_align=" << au.align
            << " l_uniform_user=" << au.uniform_user
            << " l_uniform_item=" << au.uniform_item << " l_cal_uniform_item=" << cal
            << " -> " << out << "\n";
  return 0;
}

int cmd_fuse_check(int trials, const std::string& mode, std::uint64_t seed, double tol) {
  if (trials < 1) throw ConfigError("--trials must be >= 1");
  Rng rng(seed);
  const std::vector<Index> dims{2, 8, 64};
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    const Index d = dims[rng.index(dims.size())];
    const int m = 1 + static_cast<int>(rng.index(5));
    std::vector<MatD> vs;
    for (int k = 0; k < m; ++k) {
      MatD v(1, d);
      for (Index j = 0; j < d; ++j) v(0, j) = rng.normal();
      v.row(0) /= v.row(0).norm();
      vs.push_back(std::move(v));
    }
    const double lambda = rng.uniform();
    std::vector<const MatD*> ptrs;
    for (const auto& v : vs) ptrs.push_back(&v);
    const MatD fused = mode == "linear" ? fuse_rows_linear<double>(ptrs, lambda)
                                        : fuse_rows<double>(ptrs, lambda);
    worst = std::max(worst, std::abs(fused.row(0).norm() - 1.0));
  }
  std::cout << std::setprecision(6) << "fuse-check: mode=" << mode << " trials=" << trials
            << " max_norm_deviation=" << std::scientific << worst << std::defaultfloat
            << " tol=" << tol << "\n";
  if (worst >= tol) {
    throw CheckFailure{"fuse norm deviation " + std::to_string(worst) +
                       " exceeds tolerance " + std::to_string(tol) + " (mode " + mode + ")"};
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CM3 multimodal recommender"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a block-structured synthetic bundle");
  SynthConfig synth_cfg;
  std::string synth_out;
  synth->add_option("--users", synth_cfg.users, "User count");
  synth->add_option("--items", synth_cfg.items, "Item count");
  synth->add_option("--blocks", synth_cfg.blocks, "Preference blocks");
  synth->add_option("--noise", synth_cfg.noise, "Cross-block and feature noise level");
  synth->add_option("--seed", synth_cfg.seed, "Generator seed");
  synth->add_option("--min-inter", synth_cfg.min_interactions, "Min interactions per user");
  synth->add_option("--max-inter", synth_cfg.max_interactions, "Max interactions per user");
  synth->add_option("--out", synth_out, "Output bundle directory")->required();

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Normalize raw interactions and features");
  DataOpts ingest_data;
  std::string ingest_out;
  add_data_opts(ingest, ingest_data);
  ingest->add_option("--out", ingest_out, "Output bundle directory")->required();

  // split
  auto* split = app.add_subcommand("split", "Produce a split manifest");
  DataOpts split_data;
  SplitOpts split_opts;
  std::uint64_t split_seed = 42;
  std::string split_out;
  add_data_opts(split, split_data, false);
  add_split_opts(split, split_opts);
  split->add_option("--seed", split_seed, "Split seed");
  split->add_option("--out", split_out, "Output directory")->required();

  // train / grid
  auto* train_cmd = app.add_subcommand("train", "Train one configuration");
  auto* grid_cmd = app.add_subcommand("grid", "Gamma grid search");
  DataOpts train_data, grid_data;
  SplitOpts train_split, grid_split;
  HyperOpts train_hyper, grid_hyper;
  std::string train_out, grid_out, train_grid_spec, grid_grid_spec;
  add_data_opts(train_cmd, train_data, false);
  add_split_opts(train_cmd, train_split);
  add_hyper_opts(train_cmd, train_hyper);
  train_cmd->add_option("--gamma-grid", train_grid_spec,
                        "(grid command only) gamma grid specification");
  train_cmd->add_option("--out", train_out, "Run output directory")->required();
  add_data_opts(grid_cmd, grid_data, false);
  add_split_opts(grid_cmd, grid_split);
  add_hyper_opts(grid_cmd, grid_hyper);
  grid_cmd->add_option("--gamma-grid", grid_grid_spec,
                       "Gamma grid: comma list or start:end:step (default 0.2:3.0:0.2)");
  grid_cmd->add_option("--out", grid_out, "Run output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Rank and score a checkpoint");
  DataOpts eval_data;
  SplitOpts eval_split;
  std::string eval_ckpt, eval_phase = "test", eval_out;
  std::uint64_t eval_seed = 42;
  add_data_opts(eval_cmd, eval_data, false);
  add_split_opts(eval_cmd, eval_split);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "CM3C checkpoint")->required();
  eval_cmd->add_option("--phase", eval_phase, "valid or test")
      ->check(CLI::IsMember({"valid", "test"}));
  eval_cmd->add_option("--seed", eval_seed, "Seed for internal splitting");
  eval_cmd->add_option("--out", eval_out, "Output directory")->required();

  // diagnose
  auto* diag_cmd = app.add_subcommand("diagnose", "Loss curves, uniformity and angle export");
  DataOpts diag_data;
  SplitOpts diag_split;
  std::string diag_ckpt, diag_compare, diag_out;
  double diag_t = 1.0;
  int diag_pairs = 10000;
  std::uint64_t diag_seed = 42;
  add_data_opts(diag_cmd, diag_data, false);
  add_split_opts(diag_cmd, diag_split);
  diag_cmd->add_option("--checkpoint", diag_ckpt, "CM3C checkpoint")->required();
  diag_cmd->add_option("--compare", diag_compare,
                       "Second checkpoint for the uniformity contrast");
  diag_cmd->add_option("--t", diag_t, "Uniformity temperature");
  diag_cmd->add_option("--pairs", diag_pairs, "Sampled pair count");
  diag_cmd->add_option("--seed", diag_seed, "Sampling seed");
  diag_cmd->add_option("--out", diag_out, "Output directory")->required();

  // fuse-check
  auto* fuse_cmd = app.add_subcommand("fuse-check", "Hypersphere closure suite");
  int fuse_trials = 10000;
  std::string fuse_mode = "slerp";
  std::uint64_t fuse_seed = 42;
  double fuse_tol = 1e-6;
  fuse_cmd->add_option("--trials", fuse_trials, "Number of random chains");
  fuse_cmd->add_option("--fusion", fuse_mode, "Chain variant to check")
      ->check(CLI::IsMember({"slerp", "linear"}));
  fuse_cmd->add_option("--seed", fuse_seed, "Seed");
  fuse_cmd->add_option("--tol", fuse_tol, "Max allowed |norm - 1|");

  const std::string config_path = find_config_arg(argc, argv);
  if (!config_path.empty()) {
    try {
      apply_config_file(config_path, train_hyper, train_split);
      apply_config_file(config_path, grid_hyper, grid_split);
    } catch (const Error& e) {
      std::cerr << "error: " << e.cls() << ": " << e.what() << "\n";
      return e.exit_code();
    }
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_cfg, synth_out);
    if (ingest->parsed()) return cmd_ingest(ingest_data, ingest_out);
    if (split->parsed()) return cmd_split(split_data, split_opts, split_seed, split_out);
    if (train_cmd->parsed()) {
      return cmd_train(train_data, train_split, train_hyper, train_grid_spec, train_out,
                       false);
    }
    if (grid_cmd->parsed()) {
      return cmd_train(grid_data, grid_split, grid_hyper, grid_grid_spec, grid_out, true);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(eval_data, eval_split, eval_ckpt, eval_phase, eval_seed, eval_out);
    }
    if (diag_cmd->parsed()) {
      return cmd_diagnose(diag_data, diag_split, diag_ckpt, diag_compare, diag_t,
                          diag_pairs, diag_seed, diag_out);
    }
    if (fuse_cmd->parsed()) return cmd_fuse_check(fuse_trials, fuse_mode, fuse_seed, fuse_tol);
  } catch (const CheckFailure& f) {
    std::cerr << "error: check: " << f.message << "\n";
    return kCheckFailureExit;
  } catch (const Error& e) {
    std::cerr << "error: " << e.cls() << ": " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return InternalError("").exit_code();
  }
  return 0;
}
