#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfodds/cevae.hpp"
#include "cfodds/dataset.hpp"
#include "cfodds/net.hpp"

namespace cfodds::fair {

using net::Matrix;
using net::Vector;

enum class InputMode { kFeatures, kLatent };

// A trained two-logit outcome predictor. Latent-mode inputs are
// [u | onehot(a)]; feature-mode inputs are [x | onehot(a)].
struct PredictorHandle {
  net::NetworkSpec spec;
  net::NetworkParams params;
  InputMode input_mode = InputMode::kLatent;
  int group_count = 0;
  int feature_dim = 0;  // feature mode
  int latent_dim = 0;   // latent mode

  void validate() const;
};

// Predicted P(y=1) is the softmax mass of logit 1.
double positive_probability(const Eigen::Vector2d& logits);

// Squared logit pairing penalty, gated on outcome agreement: mean over the
// two pre-softmax logits of (factual - counterfactual)^2 when y == y_cf,
// zero otherwise.
double clp_term(const Eigen::Vector2d& factual_logits,
                const Eigen::Vector2d& counterfactual_logits, int y_factual,
                int y_counterfactual);

// Factual and counterfactual logits of one predictor over one bundle.
struct BundleScores {
  Eigen::Vector2d factual_logits;
  double p_factual = 0.0;
  std::vector<Eigen::Vector2d> cf_logits;  // aligned with bundle.counterfactuals
  std::vector<double> p_cf;
};

BundleScores score_bundle(const PredictorHandle& handle,
                          const cevae::CounterfactualBundle& bundle);
std::vector<BundleScores> score_bundles(
    const PredictorHandle& handle,
    std::span<const cevae::CounterfactualBundle> bundles);

struct FairLossComponents {
  double factual_ce = 0.0;
  double cf_ce = 0.0;  // summed over counterfactual groups
  double clp = 0.0;    // summed over counterfactual groups
  double total = 0.0;
};

// Per-bundle training objective
//   J(h(in_f), y) + lambda_cf * sum_a' J(h(in_a'), y_cf) + lambda_clp * sum_a' clp_term.
// Values ignore cf_gradients; the flag only gates whether the pairing term
// backpropagates through the counterfactual logits (the factual side always
// flows). Evaluated without dropout.
FairLossComponents fair_loss(const PredictorHandle& handle,
                             const cevae::CounterfactualBundle& bundle,
                             double lambda_cf, double lambda_clp,
                             bool cf_gradients);
FairLossComponents fair_loss_with_grads(const PredictorHandle& handle,
                                        const cevae::CounterfactualBundle& bundle,
                                        double lambda_cf, double lambda_clp,
                                        bool cf_gradients,
                                        net::NetworkParams& grads);

struct FairTrainConfig {
  std::vector<double> clp_grid{0.0, 0.01, 0.1, 1.0, 10.0};
  std::vector<double> cf_grid{0.0, 0.1, 1.0, 10.0};
  std::vector<bool> cf_gradients_grid{true};
  std::vector<double> learning_rate_grid{1e-4, 1e-3, 1e-2};
  int epochs = 50;
  int batch_size = 512;
  int early_stop_patience = 10;

  void validate() const;
};

struct Candidate {
  int grid_index = -1;
  double lambda_clp = 0.0;
  double lambda_cf = 0.0;
  bool cf_gradients = true;
  double learning_rate = 0.0;
  PredictorHandle handle;
  double val_clp = 0.0;  // unweighted mean pairing term on validation bundles
  double val_ce = 0.0;   // mean factual cross entropy on validation bundles
  bool failed = false;
  std::string failure;
  std::string checkpoint_path;  // filled by the pipeline
};

// Trains one candidate per grid point (clp x cf x cf_gradients x lr, in that
// nesting order) on counterfactual bundles regenerated each epoch from the
// frozen generative model. Candidates that diverge are marked failed instead
// of aborting the sweep. threads > 1 trains candidates concurrently;
// results do not depend on the schedule.
std::vector<Candidate> train_fair_predictors(
    const FairTrainConfig& config, const cevae::CevaeSpec& vae_spec,
    const cevae::CevaeParams& vae_params, const data::Dataset& dataset,
    std::span<const std::int64_t> train_ids,
    std::span<const std::int64_t> validation_ids, std::uint64_t seed,
    int threads = 1);

// One winner per distinct lambda_clp (first-appearance order): minimal
// validation pairing term, ties to the earliest grid index. A lambda whose
// candidates all failed raises ConfigError.
std::vector<Candidate> select_models(const std::vector<Candidate>& candidates);

struct BaselineSearchSpace {
  std::vector<int> hidden_dims{32, 64, 128};
  std::vector<int> num_hidden_layers{1, 2};
  std::vector<double> dropout_probs{0.0, 0.25};
  std::vector<bool> layer_norm{false, true};
  std::vector<double> learning_rates{1e-4, 1e-3, 1e-2};
  int iterations = 20;
  int epochs = 50;
  int batch_size = 512;
  int early_stop_patience = 10;

  void validate() const;
};

struct BaselineResult {
  PredictorHandle handle;
  double val_ce = 0.0;
  double learning_rate = 0.0;
};

// Random search over the architecture lists (duplicate draws are trained
// once); returns the configuration with the lowest validation cross entropy.
BaselineResult train_baseline(const BaselineSearchSpace& search,
                              const data::Dataset& dataset,
                              std::span<const std::int64_t> train_ids,
                              std::span<const std::int64_t> validation_ids,
                              std::uint64_t seed);

}  // namespace cfodds::fair
