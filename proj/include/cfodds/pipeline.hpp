#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cfodds/cevae.hpp"
#include "cfodds/dataset.hpp"
#include "cfodds/fair.hpp"
#include "cfodds/metrics.hpp"
#include "cfodds/sem.hpp"

namespace cfodds::pipeline {

inline constexpr int kSchemaVersion = 1;

// Where the data comes from: a synthetic structural equation model drawn
// here, or an existing JSONL dataset on disk.
struct DatasetConfig {
  std::string source = "synthetic";  // "synthetic" | "file"
  std::filesystem::path path;        // file source
  std::int64_t n = 0;                // synthetic sample count
  data::SemConfig sem;               // sampling seed assigned per stage
};

// Architecture and objective of the generative model plus its training
// budget. Feature and group dimensions come from the dataset at train time.
struct VaeConfig {
  int latent_dim = 128;
  int group_embedding_dim = 64;
  int hidden_dim = 64;
  int num_hidden_layers = 1;
  double dropout_prob = 0.0;
  bool layer_norm = false;
  double lambda_x = 1000.0;
  double lambda_y = 10.0;
  double lambda_mmd = 10000.0;
  double lambda_mmd_a = 1000.0;
  std::string bandwidth_policy = "median";  // "median" | "fixed"
  double fixed_bandwidth = 1.0;
  int min_group_size = 2;
  int epochs = 30;
  int batch_size = 512;
  double learning_rate = 1e-3;

  cevae::CevaeSpec make_spec(int feature_dim, int group_count) const;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  DatasetConfig dataset;
  data::SplitFractions split;
  VaeConfig vae;
  fair::FairTrainConfig fair;
  fair::BaselineSearchSpace baseline;
  metrics::UtilitySpec utility;

  void validate() const;
};

// Strict parse: any key outside the schema fails, naming the key; nothing is
// written. The schema_version field is required and must match.
ExperimentConfig load_config(const std::filesystem::path& path);

// Stage entry points. Each loads its inputs from the output directory,
// writes its artifacts, and records them in manifest.json with content
// hashes. A stage whose upstream artifact is missing throws IoError naming
// the expected path.
void stage_generate(const ExperimentConfig& config);
void stage_split(const ExperimentConfig& config);
void stage_train_vae(const ExperimentConfig& config);
void stage_train_fair(const ExperimentConfig& config);
void stage_evaluate(const ExperimentConfig& config);
void stage_report(const ExperimentConfig& config);

// All stages in order. A stage failure stops the run, records the failing
// stage and message in the manifest, and rethrows; success returns 0.
int run_pipeline(const ExperimentConfig& config);

// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// Intra-stage parallelism cap from CFODDS_THREADS (>= 1; unset means 1).
int thread_budget();

}  // namespace cfodds::pipeline
