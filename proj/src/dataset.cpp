#include "cfodds/dataset.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cfodds/rng.hpp"

namespace cfodds::data {

using nlohmann::json;

void Dataset::validate() const {
  if (feature_dim <= 0) throw ConfigError("dataset feature_dim must be positive");
  if (group_count <= 0) throw ConfigError("dataset group_count must be positive");
  for (const auto& s : samples) {
    const std::string where = "sample id " + std::to_string(s.id);
    if (s.y != 0 && s.y != 1)
      throw ConfigError(where + ": outcome must be 0 or 1, got " + std::to_string(s.y));
    if (s.a < 0 || s.a >= group_count)
      throw ConfigError(where + ": attribute " + std::to_string(s.a) +
                        " outside [0, " + std::to_string(group_count) + ")");
    std::int32_t prev = -1;
    for (std::int32_t j : s.x) {
      if (j < 0 || j >= feature_dim)
        throw ConfigError(where + ": feature index " + std::to_string(j) +
                          " outside [0, " + std::to_string(feature_dim) + ")");
      if (j <= prev)
        throw ConfigError(where + ": feature indices must be strictly increasing");
      prev = j;
    }
  }
}

std::unordered_map<std::int64_t, std::size_t> index_by_id(const Dataset& ds) {
  std::unordered_map<std::int64_t, std::size_t> out;
  out.reserve(ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto [it, fresh] = out.emplace(ds.samples[i].id, i);
    if (!fresh)
      throw ConfigError("duplicate sample id " + std::to_string(ds.samples[i].id));
  }
  return out;
}

void SplitFractions::validate() const {
  for (double f : {train, validation, test})
    if (!(f >= 0.0 && f <= 1.0))
      throw ConfigError("split fractions must lie in [0, 1]");
  if (std::abs(train + validation + test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
}

DatasetSplit split_dataset(const std::vector<LabeledSample>& samples,
                           const SplitFractions& fractions, std::uint64_t seed) {
  fractions.validate();
  const std::size_t n = samples.size();
  const auto n_val = static_cast<std::size_t>(std::floor(double(n) * fractions.validation));
  const auto n_test = static_cast<std::size_t>(std::floor(double(n) * fractions.test));
  const std::size_t n_train = n - n_val - n_test;

  std::vector<std::int64_t> ids;
  ids.reserve(n);
  for (const auto& s : samples) ids.push_back(s.id);
  Rng rng(seed);
  rng.shuffle(ids);

  DatasetSplit split;
  split.train.assign(ids.begin(), ids.begin() + n_train);
  split.validation.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  split.test.assign(ids.begin() + n_train + n_val, ids.end());
  return split;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw IoError("dataset file " + path.string() + " is empty, expected meta header");

  Dataset ds;
  try {
    const json header = json::parse(line);
    const json& meta = header.at("meta");
    ds.feature_dim = meta.at("m").get<int>();
    ds.group_count = meta.at("K").get<int>();
  } catch (const json::exception& e) {
    throw IoError("bad dataset header in " + path.string() + ": " + e.what());
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      LabeledSample s;
      s.id = rec.at("id").get<std::int64_t>();
      s.a = rec.at("a").get<int>();
      s.y = rec.at("y").get<int>();
      s.x = rec.at("x").get<std::vector<std::int32_t>>();
      ds.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw IoError("bad dataset record at " + path.string() + ":" +
                    std::to_string(line_no) + ": " + e.what());
    }
  }
  ds.validate();
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write dataset file " + path.string());
  json header;
  header["meta"] = {{"m", ds.feature_dim}, {"K", ds.group_count}};
  out << header.dump() << '\n';
  for (const auto& s : ds.samples) {
    json rec;
    rec["id"] = s.id;
    rec["a"] = s.a;
    rec["y"] = s.y;
    rec["x"] = s.x;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("failed writing dataset file " + path.string());
}

void write_split(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write split file " + path.string());
  json j;
  j["train"] = split.train;
  j["validation"] = split.validation;
  j["test"] = split.test;
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing split file " + path.string());
}

DatasetSplit read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file " + path.string());
  try {
    const json j = json::parse(in);
    DatasetSplit split;
    split.train = j.at("train").get<std::vector<std::int64_t>>();
    split.validation = j.at("validation").get<std::vector<std::int64_t>>();
    split.test = j.at("test").get<std::vector<std::int64_t>>();
    return split;
  } catch (const json::exception& e) {
    throw IoError("bad split file " + path.string() + ": " + e.what());
  }
}

}  // namespace cfodds::data
