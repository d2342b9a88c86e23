#include "cfodds/pipeline.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <vector>

#include "cfodds/checkpoint.hpp"
#include "cfodds/errors.hpp"
#include "cfodds/rng.hpp"

namespace cfodds::pipeline {

using nlohmann::json;

namespace {

// Shortest round-trip decimal form; shared by every CSV and JSON writer so
// reruns stay byte-identical.
std::string num(double value) { return json(value).dump(); }

std::string opt_num(const std::optional<double>& value) {
  return value ? num(*value) : std::string("NA");
}

json opt_json(const std::optional<double>& value) {
  return value ? json(*value) : json(nullptr);
}

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  for (const auto& [key, unused] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok |= (key == a);
    if (!ok)
      throw ConfigError("unknown config key '" +
                        (where.empty() ? key : where + "." + key) + "'");
  }
}

const json& require_key(const json& j, const std::string& where,
                        const char* key) {
  const auto it = j.find(key);
  if (it == j.end())
    throw ConfigError("missing config key '" +
                      (where.empty() ? key : where + "." + std::string(key)) +
                      "'");
  return *it;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  const auto it = j.find(key);
  return it == j.end() ? fallback : it->get<T>();
}

std::filesystem::path artifact(const ExperimentConfig& config,
                               const std::string& name) {
  return config.output_dir / name;
}

void require_artifact(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw IoError("missing artifact " + path.string() +
                  "; an upstream stage has not produced it");
}

// manifest.json carries a hash for every artifact this pipeline wrote; the
// manifest itself is the one unhashed file.
void record_artifacts(const ExperimentConfig& config,
                      const std::vector<std::string>& names) {
  const auto manifest_path = artifact(config, "manifest.json");
  json manifest;
  std::ifstream in(manifest_path);
  if (in) {
    try {
      in >> manifest;
    } catch (const json::exception&) {
      manifest = json::object();
    }
  }
  if (!manifest.is_object()) manifest = json::object();
  manifest["schema_version"] = kSchemaVersion;
  manifest["status"] = "ok";
  manifest.erase("failure");
  if (!manifest.contains("artifacts") || !manifest["artifacts"].is_object())
    manifest["artifacts"] = json::object();
  for (const auto& name : names) {
    const auto path = artifact(config, name);
    manifest["artifacts"][name] =
        json{{"sha256", sha256_file(path)},
             {"bytes", std::filesystem::file_size(path)}};
  }
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest_path.string());
  out << manifest.dump(2) << "\n";
}

void record_failure(const ExperimentConfig& config, const std::string& stage,
                    const std::string& message) {
  const auto manifest_path = artifact(config, "manifest.json");
  json manifest;
  std::ifstream in(manifest_path);
  if (in) {
    try {
      in >> manifest;
    } catch (const json::exception&) {
      manifest = json::object();
    }
  }
  if (!manifest.is_object()) manifest = json::object();
  manifest["schema_version"] = kSchemaVersion;
  manifest["status"] = "failed";
  manifest["failure"] = json{{"stage", stage}, {"error", message}};
  if (!manifest.contains("artifacts") || !manifest["artifacts"].is_object())
    manifest["artifacts"] = json::object();
  std::ofstream out(manifest_path, std::ios::trunc);
  out << manifest.dump(2) << "\n";
}

data::SemConfig parse_sem(const json& j) {
  expect_keys(j, "dataset.sem",
              {"latent_dim", "feature_dim", "group_count", "group_marginals",
               "u_x_scale", "a_x_scale", "x_bias", "u_y_scale", "a_y_effects",
               "y_bias", "weight_seed"});
  const int d = require_key(j, "dataset.sem", "latent_dim").get<int>();
  const int m = require_key(j, "dataset.sem", "feature_dim").get<int>();
  const int K = require_key(j, "dataset.sem", "group_count").get<int>();
  const auto marginals = require_key(j, "dataset.sem", "group_marginals")
                             .get<std::vector<double>>();
  const auto effects =
      require_key(j, "dataset.sem", "a_y_effects").get<std::vector<double>>();
  // Sampling seed is stage-derived later; 0 is a placeholder.
  return data::SemConfig::from_scales(
      d, m, K, marginals, get_or(j, "u_x_scale", 1.0),
      get_or(j, "a_x_scale", 0.5), get_or(j, "x_bias", -1.0),
      get_or(j, "u_y_scale", 2.0), effects, get_or(j, "y_bias", 0.0),
      get_or<std::uint64_t>(j, "weight_seed", 1), /*seed=*/0);
}

DatasetConfig parse_dataset(const json& j) {
  expect_keys(j, "dataset", {"source", "path", "n", "sem"});
  DatasetConfig out;
  out.source = get_or<std::string>(j, "source", "synthetic");
  if (out.source == "synthetic") {
    out.n = require_key(j, "dataset", "n").get<std::int64_t>();
    out.sem = parse_sem(require_key(j, "dataset", "sem"));
  } else if (out.source == "file") {
    out.path = require_key(j, "dataset", "path").get<std::string>();
  } else {
    throw ConfigError("dataset.source must be 'synthetic' or 'file', got '" +
                      out.source + "'");
  }
  return out;
}

VaeConfig parse_vae(const json& j) {
  expect_keys(j, "vae",
              {"latent_dim", "group_embedding_dim", "hidden_dim",
               "num_hidden_layers", "dropout_prob", "layer_norm", "lambda_x",
               "lambda_y", "lambda_mmd", "lambda_mmd_a", "bandwidth_policy",
               "fixed_bandwidth", "min_group_size", "epochs", "batch_size",
               "learning_rate"});
  VaeConfig v;
  v.latent_dim = get_or(j, "latent_dim", v.latent_dim);
  v.group_embedding_dim = get_or(j, "group_embedding_dim", v.group_embedding_dim);
  v.hidden_dim = get_or(j, "hidden_dim", v.hidden_dim);
  v.num_hidden_layers = get_or(j, "num_hidden_layers", v.num_hidden_layers);
  v.dropout_prob = get_or(j, "dropout_prob", v.dropout_prob);
  v.layer_norm = get_or(j, "layer_norm", v.layer_norm);
  v.lambda_x = get_or(j, "lambda_x", v.lambda_x);
  v.lambda_y = get_or(j, "lambda_y", v.lambda_y);
  v.lambda_mmd = get_or(j, "lambda_mmd", v.lambda_mmd);
  v.lambda_mmd_a = get_or(j, "lambda_mmd_a", v.lambda_mmd_a);
  v.bandwidth_policy = get_or(j, "bandwidth_policy", v.bandwidth_policy);
  v.fixed_bandwidth = get_or(j, "fixed_bandwidth", v.fixed_bandwidth);
  v.min_group_size = get_or(j, "min_group_size", v.min_group_size);
  v.epochs = get_or(j, "epochs", v.epochs);
  v.batch_size = get_or(j, "batch_size", v.batch_size);
  v.learning_rate = get_or(j, "learning_rate", v.learning_rate);
  if (v.bandwidth_policy != "median" && v.bandwidth_policy != "fixed")
    throw ConfigError("vae.bandwidth_policy must be 'median' or 'fixed'");
  return v;
}

fair::FairTrainConfig parse_fair(const json& j) {
  expect_keys(j, "fair",
              {"clp_grid", "cf_grid", "cf_gradients_grid", "learning_rate_grid",
               "epochs", "batch_size", "early_stop_patience"});
  fair::FairTrainConfig f;
  f.clp_grid = get_or(j, "clp_grid", f.clp_grid);
  f.cf_grid = get_or(j, "cf_grid", f.cf_grid);
  f.cf_gradients_grid = get_or(j, "cf_gradients_grid", f.cf_gradients_grid);
  f.learning_rate_grid = get_or(j, "learning_rate_grid", f.learning_rate_grid);
  f.epochs = get_or(j, "epochs", f.epochs);
  f.batch_size = get_or(j, "batch_size", f.batch_size);
  f.early_stop_patience = get_or(j, "early_stop_patience", f.early_stop_patience);
  return f;
}

fair::BaselineSearchSpace parse_baseline(const json& j) {
  expect_keys(j, "baseline",
              {"hidden_dims", "num_hidden_layers", "dropout_probs", "layer_norm",
               "learning_rates", "iterations", "epochs", "batch_size",
               "early_stop_patience"});
  fair::BaselineSearchSpace b;
  b.hidden_dims = get_or(j, "hidden_dims", b.hidden_dims);
  b.num_hidden_layers = get_or(j, "num_hidden_layers", b.num_hidden_layers);
  b.dropout_probs = get_or(j, "dropout_probs", b.dropout_probs);
  b.layer_norm = get_or(j, "layer_norm", b.layer_norm);
  b.learning_rates = get_or(j, "learning_rates", b.learning_rates);
  b.iterations = get_or(j, "iterations", b.iterations);
  b.epochs = get_or(j, "epochs", b.epochs);
  b.batch_size = get_or(j, "batch_size", b.batch_size);
  b.early_stop_patience = get_or(j, "early_stop_patience", b.early_stop_patience);
  return b;
}

metrics::UtilitySpec parse_utility(const json& j) {
  expect_keys(j, "utility", {"alpha_0", "alpha_1", "threshold"});
  metrics::UtilitySpec u;
  u.alpha_0 = get_or(j, "alpha_0", u.alpha_0);
  u.alpha_1 = get_or(j, "alpha_1", u.alpha_1);
  u.threshold = get_or(j, "threshold", u.threshold);
  return u;
}

data::SplitFractions parse_split(const json& j) {
  expect_keys(j, "split", {"train", "validation", "test"});
  data::SplitFractions s;
  s.train = get_or(j, "train", s.train);
  s.validation = get_or(j, "validation", s.validation);
  s.test = get_or(j, "test", s.test);
  return s;
}

}  // namespace

cevae::CevaeSpec VaeConfig::make_spec(int feature_dim, int group_count) const {
  auto spec = cevae::CevaeSpec::make(feature_dim, group_count, latent_dim,
                                     group_embedding_dim, hidden_dim,
                                     num_hidden_layers, dropout_prob, layer_norm);
  spec.lambda_x = lambda_x;
  spec.lambda_y = lambda_y;
  spec.lambda_mmd = lambda_mmd;
  spec.lambda_mmd_a = lambda_mmd_a;
  spec.bandwidth_policy = bandwidth_policy == "fixed"
                              ? cevae::BandwidthPolicy::kFixed
                              : cevae::BandwidthPolicy::kMedianHeuristic;
  spec.fixed_bandwidth = fixed_bandwidth;
  spec.min_group_size = min_group_size;
  return spec;
}

void ExperimentConfig::validate() const {
  if (output_dir.empty())
    throw ConfigError("no output directory (config output_dir or --out)");
  split.validate();
  fair.validate();
  baseline.validate();
  utility.validate();
  if (dataset.source == "synthetic") {
    if (dataset.n <= 0) throw ConfigError("dataset.n must be positive");
    dataset.sem.validate();
  } else if (dataset.source == "file") {
    if (dataset.path.empty()) throw ConfigError("dataset.path must be set");
  } else {
    throw ConfigError("dataset.source must be 'synthetic' or 'file'");
  }
  if (vae.epochs < 0) throw ConfigError("vae.epochs must be >= 0");
  if (vae.batch_size < 1) throw ConfigError("vae.batch_size must be >= 1");
  if (!(vae.learning_rate > 0.0))
    throw ConfigError("vae.learning_rate must be positive");
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  expect_keys(j, "",
              {"schema_version", "seed", "output_dir", "dataset", "split", "vae",
               "fair", "baseline", "utility"});
  const int version = require_key(j, "", "schema_version").get<int>();
  if (version != kSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(version));

  ExperimentConfig config;
  config.seed = require_key(j, "", "seed").get<std::uint64_t>();
  config.output_dir = get_or<std::string>(j, "output_dir", "");
  config.dataset = parse_dataset(require_key(j, "", "dataset"));
  if (j.contains("split")) config.split = parse_split(j["split"]);
  if (j.contains("vae")) config.vae = parse_vae(j["vae"]);
  if (j.contains("fair")) config.fair = parse_fair(j["fair"]);
  if (j.contains("baseline")) config.baseline = parse_baseline(j["baseline"]);
  if (j.contains("utility")) config.utility = parse_utility(j["utility"]);
  return config;
}

int thread_budget() {
  const char* raw = std::getenv("CFODDS_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long value = std::strtol(raw, &end, 10);
  if (end == raw || *end != '\0' || value < 1)
    throw ConfigError("CFODDS_THREADS must be a positive integer, got '" +
                      std::string(raw) + "'");
  return static_cast<int>(value);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw IoError("cannot allocate digest context");
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buffer[65536];
  while (in.good()) {
    in.read(buffer, sizeof buffer);
    if (in.gcount() > 0)
      EVP_DigestUpdate(ctx, buffer, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_DigestFinal_ex(ctx, digest, &length);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out(length * 2, '0');
  for (unsigned int i = 0; i < length; ++i) {
    out[2 * i] = hex[digest[i] >> 4];
    out[2 * i + 1] = hex[digest[i] & 0xf];
  }
  return out;
}

void stage_generate(const ExperimentConfig& config) {
  config.validate();
  std::filesystem::create_directories(config.output_dir);
  std::vector<std::string> written;
  if (config.dataset.source == "synthetic") {
    data::SemConfig sem = config.dataset.sem;
    sem.seed = derive_seed(config.seed, "generate");
    const auto result = data::generate_sem_dataset(sem, config.dataset.n);
    data::write_dataset(result.dataset, artifact(config, "dataset.jsonl"));
    data::write_ground_truth(result.truth, artifact(config, "groundtruth.jsonl"));
    written = {"dataset.jsonl", "groundtruth.jsonl"};
  } else {
    const auto dataset = data::read_dataset(config.dataset.path);
    data::write_dataset(dataset, artifact(config, "dataset.jsonl"));
    written = {"dataset.jsonl"};
  }
  record_artifacts(config, written);
}

void stage_split(const ExperimentConfig& config) {
  config.validate();
  const auto ds_path = artifact(config, "dataset.jsonl");
  require_artifact(ds_path);
  const auto dataset = data::read_dataset(ds_path);
  const auto split = data::split_dataset(dataset.samples, config.split,
                                         derive_seed(config.seed, "split"));
  data::write_split(split, artifact(config, "splits.json"));
  record_artifacts(config, {"splits.json"});
}

void stage_train_vae(const ExperimentConfig& config) {
  config.validate();
  const auto ds_path = artifact(config, "dataset.jsonl");
  const auto split_path = artifact(config, "splits.json");
  require_artifact(ds_path);
  require_artifact(split_path);
  const auto dataset = data::read_dataset(ds_path);
  const auto split = data::read_split(split_path);

  const auto spec = config.vae.make_spec(dataset.feature_dim, dataset.group_count);
  cevae::TrainCevaeOptions options;
  options.epochs = config.vae.epochs;
  options.batch_size = config.vae.batch_size;
  options.learning_rate = config.vae.learning_rate;
  options.seed = derive_seed(config.seed, "train-vae");
  const auto result =
      cevae::train_cevae(spec, dataset, split.train, split.validation, options);
  checkpoint::save_cevae(artifact(config, "vae.json"), spec, result.params,
                         options.seed, result.best_epoch);
  record_artifacts(config, {"vae.json", "vae.bin"});
}

namespace {

std::string candidate_file(int grid_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "candidate_%03d.json", grid_index);
  return buf;
}

void write_candidates_csv(const std::filesystem::path& path,
                          const std::vector<fair::Candidate>& candidates) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "lambda_clp,lambda_cf,cf_gradients,learning_rate,val_clp,val_ce,"
         "checkpoint_path\n";
  for (const auto& c : candidates) {
    out << num(c.lambda_clp) << ',' << num(c.lambda_cf) << ','
        << (c.cf_gradients ? "true" : "false") << ',' << num(c.learning_rate)
        << ',';
    if (c.failed) {
      out << ",,\n";
    } else {
      out << num(c.val_clp) << ',' << num(c.val_ce) << ',' << c.checkpoint_path
          << "\n";
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<fair::Candidate> read_candidates_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing artifact " + path.string() +
                         "; an upstream stage has not produced it");
  std::string line;
  if (!std::getline(in, line))
    throw IoError("empty candidate ledger " + path.string());
  std::vector<fair::Candidate> out;
  int index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    cells.resize(7);
    fair::Candidate c;
    c.grid_index = index++;
    c.lambda_clp = std::stod(cells[0]);
    c.lambda_cf = std::stod(cells[1]);
    c.cf_gradients = cells[2] == "true";
    c.learning_rate = std::stod(cells[3]);
    if (cells[4].empty() || cells[6].empty()) {
      c.failed = true;
    } else {
      c.val_clp = std::stod(cells[4]);
      c.val_ce = std::stod(cells[5]);
      c.checkpoint_path = cells[6];
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

void stage_train_fair(const ExperimentConfig& config) {
  config.validate();
  const auto ds_path = artifact(config, "dataset.jsonl");
  const auto split_path = artifact(config, "splits.json");
  const auto vae_path = artifact(config, "vae.json");
  require_artifact(ds_path);
  require_artifact(split_path);
  require_artifact(vae_path);
  const auto dataset = data::read_dataset(ds_path);
  const auto split = data::read_split(split_path);
  const auto vae = checkpoint::load_cevae(vae_path);

  const std::uint64_t baseline_seed = derive_seed(config.seed, "train-baseline");
  const auto baseline = fair::train_baseline(config.baseline, dataset,
                                             split.train, split.validation,
                                             baseline_seed);
  checkpoint::save_predictor(artifact(config, "baseline.json"), baseline.handle,
                             baseline_seed, 0);
  std::vector<std::string> written{"baseline.json", "baseline.bin"};

  const std::uint64_t fair_seed = derive_seed(config.seed, "train-fair");
  auto candidates =
      fair::train_fair_predictors(config.fair, vae.spec, vae.params, dataset,
                                  split.train, split.validation, fair_seed,
                                  thread_budget());
  for (auto& c : candidates) {
    if (c.failed) continue;
    c.checkpoint_path = candidate_file(c.grid_index);
    checkpoint::save_predictor(artifact(config, c.checkpoint_path), c.handle,
                               derive_seed(fair_seed, "fair-candidate",
                                           c.grid_index),
                               0);
    written.push_back(c.checkpoint_path);
    auto bin = c.checkpoint_path;
    bin.replace(bin.size() - 4, 4, "bin");
    written.push_back(bin);
  }
  write_candidates_csv(artifact(config, "candidates.csv"), candidates);
  written.push_back("candidates.csv");
  record_artifacts(config, written);
}

namespace {

json scalar_json(const metrics::ScalarMetrics& s) {
  return json{{"auc_roc", opt_json(s.auc_roc)},
              {"auc_prc", opt_json(s.auc_prc)},
              {"brier", s.brier},
              {"count", s.count}};
}

json eo_json(const metrics::EqualizedOddsReport& r) {
  json rates = json::array();
  for (const auto& g : r.rates)
    rates.push_back(json{{"fpr", opt_json(g.fpr)},
                         {"fnr", opt_json(g.fnr)},
                         {"count", g.count}});
  json gaps = json::array();
  for (const auto& g : r.gaps)
    gaps.push_back(json{{"group_a", g.group_a},
                        {"group_b", g.group_b},
                        {"fpr_gap", opt_json(g.fpr_gap)},
                        {"fnr_gap", opt_json(g.fnr_gap)}});
  return json{{"rates", std::move(rates)}, {"gaps", std::move(gaps)}};
}

json dp_json(const metrics::DemographicParityReport& r) {
  json rates = json::array();
  for (const auto& g : r.positive_rates) rates.push_back(opt_json(g));
  json gaps = json::array();
  for (const auto& g : r.gaps)
    gaps.push_back(json{{"group_a", g.group_a},
                        {"group_b", g.group_b},
                        {"gap", opt_json(g.gap)}});
  return json{{"positive_rates", std::move(rates)}, {"gaps", std::move(gaps)}};
}

json utility_json(const metrics::UtilityReport& r) {
  json out = json::object();
  for (int s = 0; s < 2; ++s) {
    json values = json::array();
    for (const auto& cell : r.values[s])
      values.push_back(
          json{{"value", opt_json(cell.value)}, {"count", cell.count}});
    json gaps = json::array();
    for (const auto& g : r.gaps[s])
      gaps.push_back(json{{"group_a", g.group_a},
                          {"group_b", g.group_b},
                          {"gap", opt_json(g.gap)}});
    out["y" + std::to_string(s)] =
        json{{"values", std::move(values)}, {"gaps", std::move(gaps)}};
  }
  return out;
}

json matrix_json(const metrics::CfDiffMatrix& m) {
  json mean = json::array();
  json count = json::array();
  for (int a = 0; a < m.group_count; ++a) {
    json mrow = json::array();
    json crow = json::array();
    for (int b = 0; b < m.group_count; ++b) {
      mrow.push_back(m.at(a, b).mean_diff);
      crow.push_back(m.at(a, b).count);
    }
    mean.push_back(std::move(mrow));
    count.push_back(std::move(crow));
  }
  return json{{"group_count", m.group_count},
              {"outcome", m.outcome ? json(*m.outcome) : json(nullptr)},
              {"mean_diff", std::move(mean)},
              {"count", std::move(count)}};
}

json model_metrics_json(const metrics::ModelMetrics& m) {
  json per_group = json::array();
  for (const auto& g : m.per_group) per_group.push_back(scalar_json(g));
  return json{{"overall", scalar_json(m.overall)},
              {"per_group", std::move(per_group)},
              {"equalized_odds", eo_json(m.equalized_odds)},
              {"demographic_parity", dp_json(m.demographic_parity)},
              {"utility", utility_json(m.utility)},
              {"clp", m.clp},
              {"cf_diff_y0", matrix_json(m.cf_diff_y0)},
              {"cf_diff_y1", matrix_json(m.cf_diff_y1)},
              {"cf_diff_all", matrix_json(m.cf_diff_all)}};
}

std::vector<cevae::CounterfactualBundle> eval_bundles(
    const cevae::CevaeSpec& spec, const cevae::CevaeParams& params,
    const data::Dataset& dataset, const std::vector<std::int64_t>& ids,
    std::uint64_t seed) {
  const auto index = data::index_by_id(dataset);
  Rng rng(seed);
  std::vector<cevae::CounterfactualBundle> bundles;
  bundles.reserve(ids.size());
  for (auto id : ids) {
    const auto it = index.find(id);
    if (it == index.end())
      throw ConfigError("split references unknown sample id " +
                        std::to_string(id));
    bundles.push_back(cevae::sample_counterfactual_bundle(
        spec, params, dataset.samples[it->second], cevae::LatentMode::kMean,
        rng, /*sample_features=*/true));
  }
  return bundles;
}

}  // namespace

void stage_evaluate(const ExperimentConfig& config) {
  config.validate();
  const auto ds_path = artifact(config, "dataset.jsonl");
  const auto split_path = artifact(config, "splits.json");
  const auto vae_path = artifact(config, "vae.json");
  const auto ledger_path = artifact(config, "candidates.csv");
  const auto baseline_path = artifact(config, "baseline.json");
  require_artifact(ds_path);
  require_artifact(split_path);
  require_artifact(vae_path);
  require_artifact(ledger_path);
  require_artifact(baseline_path);

  const auto dataset = data::read_dataset(ds_path);
  const auto split = data::read_split(split_path);
  const auto vae = checkpoint::load_cevae(vae_path);
  const auto ledger = read_candidates_csv(ledger_path);
  const auto selected = fair::select_models(ledger);
  const auto baseline = checkpoint::load_predictor(baseline_path);

  const auto test_bundles =
      eval_bundles(vae.spec, vae.params, dataset, split.test,
                   derive_seed(config.seed, "eval-bundles-test"));
  const auto val_bundles =
      eval_bundles(vae.spec, vae.params, dataset, split.validation,
                   derive_seed(config.seed, "eval-bundles-val"));

  json models = json::array();
  auto add_model = [&](const std::string& label, const json& meta,
                       const fair::PredictorHandle& handle) {
    const auto test_scores = fair::score_bundles(handle, test_bundles);
    const auto val_scores = fair::score_bundles(handle, val_bundles);
    const auto test_metrics = metrics::compute_model_metrics(
        test_bundles, test_scores, dataset.group_count, config.utility);
    const auto val_metrics = metrics::compute_model_metrics(
        val_bundles, val_scores, dataset.group_count, config.utility);
    json entry = meta;
    entry["label"] = label;
    entry["test"] = model_metrics_json(test_metrics);
    entry["validation"] = model_metrics_json(val_metrics);
    models.push_back(std::move(entry));
  };

  add_model("baseline",
            json{{"lambda_clp", nullptr},
                 {"lambda_cf", nullptr},
                 {"cf_gradients", nullptr},
                 {"learning_rate", nullptr}},
            baseline.handle);
  for (const auto& c : selected) {
    const auto ckpt_path = artifact(config, c.checkpoint_path);
    require_artifact(ckpt_path);
    const auto predictor = checkpoint::load_predictor(ckpt_path);
    add_model("clp_" + num(c.lambda_clp),
              json{{"lambda_clp", c.lambda_clp},
                   {"lambda_cf", c.lambda_cf},
                   {"cf_gradients", c.cf_gradients},
                   {"learning_rate", c.learning_rate},
                   {"ledger_val_clp", c.val_clp},
                   {"ledger_val_ce", c.val_ce}},
              predictor.handle);
  }

  const json report{{"schema_version", kSchemaVersion},
                    {"group_count", dataset.group_count},
                    {"models", std::move(models)}};
  const auto metrics_path = artifact(config, "metrics.json");
  std::ofstream out(metrics_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + metrics_path.string());
  out << report.dump(2) << "\n";
  if (!out) throw IoError("short write to " + metrics_path.string());
  record_artifacts(config, {"metrics.json"});
}

namespace {

std::string csv_cell(const json& j) {
  if (j.is_null()) return "N/A";
  if (j.is_boolean()) return j.get<bool>() ? "true" : "false";
  if (j.is_string()) return j.get<std::string>();
  return j.dump();
}

std::string max_gap(const json& gaps, const char* field) {
  std::optional<double> best;
  for (const auto& g : gaps) {
    const auto& v = g.at(field);
    if (v.is_null()) continue;
    const double value = v.get<double>();
    if (!best || value > *best) best = value;
  }
  return opt_num(best);
}

}  // namespace

void stage_report(const ExperimentConfig& config) {
  config.validate();
  const auto metrics_path = artifact(config, "metrics.json");
  require_artifact(metrics_path);
  std::ifstream in(metrics_path);
  json report;
  try {
    in >> report;
  } catch (const json::exception& e) {
    throw IoError("malformed metrics.json: " + std::string(e.what()));
  }

  const auto summary_path = artifact(config, "report.csv");
  {
    std::ofstream out(summary_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + summary_path.string());
    out << "model,lambda_clp,lambda_cf,cf_gradients,learning_rate,val_clp,"
           "test_clp,test_auc_roc,test_auc_prc,test_brier,test_max_fpr_gap,"
           "test_max_fnr_gap,test_max_dp_gap\n";
    for (const auto& m : report.at("models")) {
      const auto& test = m.at("test");
      const auto& overall = test.at("overall");
      out << csv_cell(m.at("label")) << ',' << csv_cell(m.at("lambda_clp"))
          << ',' << csv_cell(m.at("lambda_cf")) << ','
          << csv_cell(m.at("cf_gradients")) << ','
          << csv_cell(m.at("learning_rate")) << ','
          << csv_cell(m.at("validation").at("clp")) << ','
          << csv_cell(test.at("clp")) << ',' << csv_cell(overall.at("auc_roc"))
          << ',' << csv_cell(overall.at("auc_prc")) << ','
          << csv_cell(overall.at("brier")) << ','
          << max_gap(test.at("equalized_odds").at("gaps"), "fpr_gap") << ','
          << max_gap(test.at("equalized_odds").at("gaps"), "fnr_gap") << ','
          << max_gap(test.at("demographic_parity").at("gaps"), "gap") << "\n";
    }
    if (!out) throw IoError("short write to " + summary_path.string());
  }

  const auto groups_path = artifact(config, "report_groups.csv");
  {
    std::ofstream out(groups_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + groups_path.string());
    out << "model,lambda_clp,group,count,auc_roc,auc_prc,brier,fpr,fnr,"
           "positive_rate,utility_y0,utility_y1\n";
    for (const auto& m : report.at("models")) {
      const auto& test = m.at("test");
      const auto& per_group = test.at("per_group");
      const auto& eo = test.at("equalized_odds").at("rates");
      const auto& dp = test.at("demographic_parity").at("positive_rates");
      const auto& util = test.at("utility");
      for (std::size_t g = 0; g < per_group.size(); ++g) {
        const auto& pg = per_group[g];
        out << csv_cell(m.at("label")) << ',' << csv_cell(m.at("lambda_clp"))
            << ',' << g << ',' << csv_cell(pg.at("count")) << ','
            << csv_cell(pg.at("auc_roc")) << ',' << csv_cell(pg.at("auc_prc"))
            << ',' << csv_cell(pg.at("brier")) << ','
            << csv_cell(eo[g].at("fpr")) << ',' << csv_cell(eo[g].at("fnr"))
            << ',' << csv_cell(dp[g]) << ','
            << csv_cell(util.at("y0").at("values")[g].at("value")) << ','
            << csv_cell(util.at("y1").at("values")[g].at("value")) << "\n";
      }
    }
    if (!out) throw IoError("short write to " + groups_path.string());
  }

  json diff{{"schema_version", kSchemaVersion}, {"models", json::array()}};
  for (const auto& m : report.at("models")) {
    const auto& test = m.at("test");
    diff["models"].push_back(json{{"label", m.at("label")},
                                  {"lambda_clp", m.at("lambda_clp")},
                                  {"y0", test.at("cf_diff_y0")},
                                  {"y1", test.at("cf_diff_y1")},
                                  {"unconditioned", test.at("cf_diff_all")}});
  }
  const auto diff_path = artifact(config, "cf_diff.json");
  {
    std::ofstream out(diff_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + diff_path.string());
    out << diff.dump(2) << "\n";
    if (!out) throw IoError("short write to " + diff_path.string());
  }
  record_artifacts(config, {"report.csv", "report_groups.csv", "cf_diff.json"});
}

int run_pipeline(const ExperimentConfig& config) {
  config.validate();
  std::filesystem::create_directories(config.output_dir);
  struct Stage {
    const char* name;
    void (*fn)(const ExperimentConfig&);
  };
  const Stage stages[] = {{"generate", stage_generate},
                          {"split", stage_split},
                          {"train-vae", stage_train_vae},
                          {"train-fair", stage_train_fair},
                          {"evaluate", stage_evaluate},
                          {"report", stage_report}};
  for (const auto& stage : stages) {
    try {
      stage.fn(config);
    } catch (const std::exception& e) {
      record_failure(config, stage.name, e.what());
      throw;
    }
  }
  return 0;
}

}  // namespace cfodds::pipeline
