#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cfodds/dataset.hpp"

namespace cfodds::data {

// Structural equation model over (U, A, X, Y):
//   u ~ N(0, I_d)
//   a ~ Categorical(group_marginals)
//   x_j = 1[ e_j < sigmoid(u . w_ux[:,j] + w_ax(a,j) + b_x[j]) ],  e_j ~ U[0,1)
//   y   = 1[ e_y < sigmoid(u . w_uy     + w_ay[a]   + b_y) ],      e_y ~ U[0,1)
// Counterfactuals under do(A = a') reuse the same u and the same exogenous
// uniforms, so flipping a moves an indicator exactly when the uniform falls
// between the two activation probabilities (monotone coupling).
struct SemConfig {
  int latent_dim = 8;
  int feature_dim = 200;
  int group_count = 2;
  std::vector<double> group_marginals;  // size K, nonnegative, sums to 1

  Eigen::MatrixXd w_ux;  // d x m
  Eigen::MatrixXd w_ax;  // K x m
  Eigen::VectorXd b_x;   // m
  Eigen::VectorXd w_uy;  // d
  Eigen::VectorXd w_ay;  // K
  double b_y = 0.0;

  std::uint64_t seed = 0;  // master seed for sampling

  void validate() const;

  // Convenience builder: dense weights drawn from `weight_seed`, scaled so the
  // logit contribution of each block is O(scale). a_y_effects is copied
  // verbatim into w_ay so direct attribute effects are exact.
  static SemConfig from_scales(int latent_dim, int feature_dim, int group_count,
                               std::vector<double> group_marginals,
                               double u_x_scale, double a_x_scale, double x_bias,
                               double u_y_scale, std::vector<double> a_y_effects,
                               double y_bias, std::uint64_t weight_seed,
                               std::uint64_t seed);
};

// Per-sample ground truth: the latent draw and the full table of
// counterfactuals, one entry per attribute value (the factual slot repeats
// the observed data, so y_cf[a] == y always).
struct GroundTruthRecord {
  std::int64_t id = 0;
  Eigen::VectorXd u;
  std::vector<int> y_cf;                       // size K
  std::vector<std::vector<std::int32_t>> x_cf;  // size K, sorted indices
};

struct GroundTruth {
  int latent_dim = 0;
  int group_count = 0;
  std::vector<GroundTruthRecord> records;
};

struct SemDataset {
  Dataset dataset;
  GroundTruth truth;
};

SemDataset generate_sem_dataset(const SemConfig& config, std::int64_t n);

// JSON Lines mirror of the dataset format; header {"meta":{"d":...,"K":...}}.
void write_ground_truth(const GroundTruth& gt, const std::filesystem::path& path);
GroundTruth read_ground_truth(const std::filesystem::path& path);

}  // namespace cfodds::data
