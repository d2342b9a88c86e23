#include "cfodds/sem.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cfodds/rng.hpp"

namespace cfodds::data {

using nlohmann::json;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

void SemConfig::validate() const {
  if (latent_dim <= 0) throw ConfigError("sem latent_dim must be positive");
  if (feature_dim <= 0) throw ConfigError("sem feature_dim must be positive");
  if (group_count <= 0) throw ConfigError("sem group_count must be positive");
  if (static_cast<int>(group_marginals.size()) != group_count)
    throw ConfigError("sem group_marginals must have one entry per group");
  double total = 0.0;
  for (double p : group_marginals) {
    if (!(p >= 0.0)) throw ConfigError("sem group_marginals must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("sem group_marginals must sum to 1");
  if (w_ux.rows() != latent_dim || w_ux.cols() != feature_dim)
    throw ConfigError("sem w_ux must be latent_dim x feature_dim");
  if (w_ax.rows() != group_count || w_ax.cols() != feature_dim)
    throw ConfigError("sem w_ax must be group_count x feature_dim");
  if (b_x.size() != feature_dim) throw ConfigError("sem b_x must have feature_dim entries");
  if (w_uy.size() != latent_dim) throw ConfigError("sem w_uy must have latent_dim entries");
  if (w_ay.size() != group_count) throw ConfigError("sem w_ay must have group_count entries");
}

SemConfig SemConfig::from_scales(int latent_dim, int feature_dim, int group_count,
                                 std::vector<double> group_marginals,
                                 double u_x_scale, double a_x_scale, double x_bias,
                                 double u_y_scale, std::vector<double> a_y_effects,
                                 double y_bias, std::uint64_t weight_seed,
                                 std::uint64_t seed) {
  SemConfig cfg;
  cfg.latent_dim = latent_dim;
  cfg.feature_dim = feature_dim;
  cfg.group_count = group_count;
  cfg.group_marginals = std::move(group_marginals);
  cfg.seed = seed;

  if (static_cast<int>(a_y_effects.size()) != group_count)
    throw ConfigError("a_y_effects must have one entry per group");

  Rng rng(derive_seed(weight_seed, "sem-weights"));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(latent_dim));

  cfg.w_ux.resize(latent_dim, feature_dim);
  for (int j = 0; j < feature_dim; ++j)
    for (int i = 0; i < latent_dim; ++i)
      cfg.w_ux(i, j) = rng.normal() * u_x_scale * inv_sqrt_d;

  cfg.w_ax.resize(group_count, feature_dim);
  for (int j = 0; j < feature_dim; ++j)
    for (int k = 0; k < group_count; ++k)
      cfg.w_ax(k, j) = rng.normal() * a_x_scale;

  cfg.b_x = Eigen::VectorXd::Constant(feature_dim, x_bias);

  cfg.w_uy.resize(latent_dim);
  for (int i = 0; i < latent_dim; ++i)
    cfg.w_uy(i) = rng.normal() * u_y_scale * inv_sqrt_d;

  cfg.w_ay.resize(group_count);
  for (int k = 0; k < group_count; ++k) cfg.w_ay(k) = a_y_effects[k];
  cfg.b_y = y_bias;

  cfg.validate();
  return cfg;
}

SemDataset generate_sem_dataset(const SemConfig& config, std::int64_t n) {
  config.validate();
  if (n < 0) throw ConfigError("sem sample count must be nonnegative");

  const int d = config.latent_dim;
  const int m = config.feature_dim;
  const int K = config.group_count;

  SemDataset out;
  out.dataset.feature_dim = m;
  out.dataset.group_count = K;
  out.dataset.samples.reserve(n);
  out.truth.latent_dim = d;
  out.truth.group_count = K;
  out.truth.records.reserve(n);

  Rng rng(derive_seed(config.seed, "sem-generate"));
  Eigen::VectorXd u(d);
  std::vector<double> noise_x(m);

  // Draw order per sample is fixed: u, a, e_y, e_x[0..m). Counterfactual
  // branches reuse the draws, so they cost no extra randomness.
  for (std::int64_t i = 0; i < n; ++i) {
    for (int t = 0; t < d; ++t) u(t) = rng.normal();
    const int a = rng.categorical(config.group_marginals);
    const double noise_y = rng.uniform();
    for (int j = 0; j < m; ++j) noise_x[j] = rng.uniform();

    const Eigen::VectorXd x_logit_u = config.w_ux.transpose() * u + config.b_x;
    const double y_logit_u = config.w_uy.dot(u) + config.b_y;

    GroundTruthRecord rec;
    rec.id = i;
    rec.u = u;
    rec.y_cf.resize(K);
    rec.x_cf.resize(K);
    for (int k = 0; k < K; ++k) {
      rec.y_cf[k] = noise_y < sigmoid(y_logit_u + config.w_ay(k)) ? 1 : 0;
      auto& xk = rec.x_cf[k];
      for (int j = 0; j < m; ++j)
        if (noise_x[j] < sigmoid(x_logit_u(j) + config.w_ax(k, j))) xk.push_back(j);
    }

    LabeledSample s;
    s.id = i;
    s.a = a;
    s.y = rec.y_cf[a];
    s.x = rec.x_cf[a];
    out.dataset.samples.push_back(std::move(s));
    out.truth.records.push_back(std::move(rec));
  }
  return out;
}

void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write ground truth file " + path.string());
  json header;
  header["meta"] = {{"d", gt.latent_dim}, {"K", gt.group_count}};
  out << header.dump() << '\n';
  for (const auto& r : gt.records) {
    json rec;
    rec["id"] = r.id;
    rec["u"] = std::vector<double>(r.u.data(), r.u.data() + r.u.size());
    rec["y_cf"] = r.y_cf;
    rec["x_cf"] = r.x_cf;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("failed writing ground truth file " + path.string());
}

GroundTruth read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ground truth file " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw IoError("ground truth file " + path.string() + " is empty");

  GroundTruth gt;
  try {
    const json header = json::parse(line);
    gt.latent_dim = header.at("meta").at("d").get<int>();
    gt.group_count = header.at("meta").at("K").get<int>();
  } catch (const json::exception& e) {
    throw IoError("bad ground truth header in " + path.string() + ": " + e.what());
  }

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      GroundTruthRecord r;
      r.id = j.at("id").get<std::int64_t>();
      const auto uvec = j.at("u").get<std::vector<double>>();
      r.u = Eigen::Map<const Eigen::VectorXd>(uvec.data(), uvec.size());
      r.y_cf = j.at("y_cf").get<std::vector<int>>();
      r.x_cf = j.at("x_cf").get<std::vector<std::vector<std::int32_t>>>();
      gt.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw IoError("bad ground truth record at " + path.string() + ":" +
                    std::to_string(line_no) + ": " + e.what());
    }
  }
  return gt;
}

}  // namespace cfodds::data
