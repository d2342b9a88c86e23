#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "cfodds/errors.hpp"

namespace cfodds::data {

// One record: sparse binary feature vector (sorted active indices), binary
// outcome, protected attribute index.
struct LabeledSample {
  std::int64_t id = 0;
  std::vector<std::int32_t> x;  // strictly increasing, each in [0, feature_dim)
  int y = 0;                    // {0, 1}
  int a = 0;                    // [0, group_count)
};

struct Dataset {
  int feature_dim = 0;  // m
  int group_count = 0;  // K
  std::vector<LabeledSample> samples;

  // Throws ConfigError naming the offending sample id.
  void validate() const;
};

// Maps sample id -> position in dataset.samples.
std::unordered_map<std::int64_t, std::size_t> index_by_id(const Dataset& ds);

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
  void validate() const;  // each in [0,1], sum == 1 within 1e-9
};

struct DatasetSplit {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> validation;
  std::vector<std::int64_t> test;
};

// Disjoint, exhaustive, deterministic in (samples order, fractions, seed).
// Sizes: n_val = floor(n*f_val), n_test = floor(n*f_test), remainder to train.
DatasetSplit split_dataset(const std::vector<LabeledSample>& samples,
                           const SplitFractions& fractions, std::uint64_t seed);

// JSON Lines; first line {"meta":{"m":...,"K":...}}, then one sample per line
// {"id":...,"a":...,"y":...,"x":[...]}.
Dataset read_dataset(const std::filesystem::path& path);
void write_dataset(const Dataset& ds, const std::filesystem::path& path);

void write_split(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit read_split(const std::filesystem::path& path);

}  // namespace cfodds::data
