#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cfodds/dataset.hpp"
#include "cfodds/net.hpp"

namespace cfodds::cevae {

using net::Matrix;
using net::Vector;

enum class BandwidthPolicy { kMedianHeuristic, kFixed };

// Latent-variable generative model over (X, A, Y) with a shared confounder U:
// encoder q(u|x,a) and decoders p(x|u,a), p(y|u,a). The attribute enters the
// encoder one-hot and the decoders through a learned embedding row.
struct CevaeSpec {
  int feature_dim = 0;   // m
  int group_count = 0;   // K
  int latent_dim = 128;  // d
  int group_embedding_dim = 64;

  net::NetworkSpec encoder;    // (m + K) -> 2d, Gaussian natural outputs
  net::NetworkSpec decoder_x;  // (d + e) -> m logits
  net::NetworkSpec decoder_y;  // (d + e) -> 1 logit

  double lambda_x = 1000.0;
  double lambda_y = 10.0;
  double lambda_mmd = 10000.0;
  double lambda_mmd_a = 1000.0;

  // Kernel bandwidth for the MMD terms. The median heuristic recomputes the
  // bandwidth from each batch's posterior samples and treats it as a constant
  // in the backward pass; the fixed policy pins it (used by gradient audits).
  BandwidthPolicy bandwidth_policy = BandwidthPolicy::kMedianHeuristic;
  double fixed_bandwidth = 1.0;

  int min_group_size = 2;  // groups smaller than this skip the per-group MMD

  void validate() const;

  // Builder wiring all three networks consistently around (m, K, d, e).
  static CevaeSpec make(int feature_dim, int group_count, int latent_dim,
                        int group_embedding_dim, int hidden_dim,
                        int num_hidden_layers, double dropout_prob,
                        bool layer_norm);
};

struct GaussianPosterior {
  Vector mu;
  Vector sigma;  // strictly positive (softplus of the raw encoder output)
};

struct CevaeParams {
  net::NetworkParams encoder;
  net::NetworkParams decoder_x;
  net::NetworkParams decoder_y;
  Matrix embedding;  // K x group_embedding_dim, init N(0, 0.01^2)

  static CevaeParams init(const CevaeSpec& spec, Rng& rng);
  static CevaeParams zeros(const CevaeSpec& spec);
};

// Fixed block order: encoder, decoder_x, decoder_y, embedding.
std::vector<net::ParamBlock> param_blocks(CevaeParams& params);

// ---- single-sample inference ----

GaussianPosterior encode(const CevaeSpec& spec, const CevaeParams& params,
                         std::span<const std::int32_t> x_indices, int a);
// Reparameterized draw u = mu + sigma .* eps.
Vector sample_latent(const GaussianPosterior& posterior, Rng& rng);
// Per-feature Bernoulli means of p(x|u,a).
Vector decode_x(const CevaeSpec& spec, const CevaeParams& params,
                const Vector& u, int a);
// Outcome probability p(y=1|u,a).
double decode_y(const CevaeSpec& spec, const CevaeParams& params,
                const Vector& u, int a);

// Batched posterior parameters, eval mode (no dropout, no draws).
void encode_batch(const CevaeSpec& spec, const CevaeParams& params,
                  const Matrix& x_dense, std::span<const int> a, Matrix& mu,
                  Matrix& sigma);
// Batched outcome probabilities under a fixed intervened attribute.
Vector decode_y_batch(const CevaeSpec& spec, const CevaeParams& params,
                      const Matrix& u, int a);

// KL(q || N(0,I)) for a diagonal Gaussian; diagnostic only, the training
// objective regularizes with MMD instead.
double gaussian_kl(const GaussianPosterior& posterior);

// Squared MMD between two sample sets, biased V-statistic with the Gaussian
// RBF kernel k(x,y) = exp(-|x-y|^2 / (2 bandwidth^2)), diagonal terms
// included, clamped at zero.
double mmd_sq(const Matrix& samples_p, const Matrix& samples_q, double bandwidth);

// ---- batched loss ----

struct Batch {
  Matrix x;            // n x m dense 0/1
  std::vector<int> a;  // n
  Vector y;            // n, values in {0,1}
};

Batch make_batch(const data::Dataset& dataset,
                 std::span<const std::size_t> positions);

struct LossComponents {
  double recon_x = 0.0;       // mean over samples of mean per-feature BCE
  double recon_y = 0.0;       // mean outcome BCE
  double mmd = 0.0;           // aggregate posterior vs prior
  double mmd_per_group = 0.0; // sum over qualifying groups
  double total = 0.0;         // lambda-weighted sum
  double bandwidth = 0.0;     // bandwidth actually used
};

// All randomness (dropout, reparameterization, prior draws) comes from a
// fresh stream seeded with `seed`, so the value is a pure function of
// (spec, params, batch, seed, mode).
LossComponents cevae_loss(const CevaeSpec& spec, const CevaeParams& params,
                          const Batch& batch, std::uint64_t seed,
                          net::Mode mode = net::Mode::kTrain);
LossComponents cevae_loss_backward(const CevaeSpec& spec, const CevaeParams& params,
                                   const Batch& batch, std::uint64_t seed,
                                   net::Mode mode, CevaeParams& grads);

// ---- counterfactual bundles ----

struct CounterfactualSample {
  int a_target = 0;
  std::vector<std::int32_t> x_cf;  // sorted indices; empty when not sampled
  int y_cf = 0;
  double p_y_cf = 0.0;  // decoder outcome probability under a_target
};

// Abduction-action-prediction around one factual record: a single latent code
// is inferred from (x, a) and reused for every intervention do(A = a').
struct CounterfactualBundle {
  std::int64_t sample_id = 0;
  std::vector<std::int32_t> x;
  int a = 0;
  int y = 0;
  Vector u;
  double p_y_factual = 0.0;
  bool has_features = false;  // whether x_cf draws were materialized
  std::vector<CounterfactualSample> counterfactuals;  // ascending a', factual skipped

  const CounterfactualSample& for_group(int a_target) const;
};

enum class LatentMode { kSampled, kMean };

// sample_features toggles the per-feature Bernoulli draws for x_cf; callers
// that only consume (u, y_cf) can skip them (the draw stream stays
// deterministic either way).
CounterfactualBundle sample_counterfactual_bundle(
    const CevaeSpec& spec, const CevaeParams& params,
    const data::LabeledSample& sample, LatentMode latent_mode, Rng& rng,
    bool sample_features = true);

// ---- training ----

struct TrainCevaeOptions {
  int epochs = 30;
  int batch_size = 512;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct EpochStats {
  int epoch = 0;
  LossComponents train;       // mean over the epoch's minibatches
  LossComponents validation;  // fixed-seed eval pass
};

struct TrainCevaeResult {
  CevaeParams params;  // parameters of the best validation epoch
  std::vector<EpochStats> trace;
  int best_epoch = -1;  // -1 when epochs == 0
};

// Adam on all blocks; epochs == 0 returns the initial parameters untouched.
// Throws DivergenceError when a loss or parameter goes non-finite.
TrainCevaeResult train_cevae(const CevaeSpec& spec, const data::Dataset& dataset,
                             std::span<const std::int64_t> train_ids,
                             std::span<const std::int64_t> validation_ids,
                             const TrainCevaeOptions& options);

}  // namespace cfodds::cevae
