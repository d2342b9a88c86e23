#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cfodds/errors.hpp"
#include "cfodds/rng.hpp"

namespace cfodds::net {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Mode { kTrain, kEval };

// Feed-forward topology: num_hidden_layers blocks of
//   affine -> (layer norm) -> ReLU -> (inverted dropout)
// followed by a final affine. num_hidden_layers == 0 degenerates to a single
// affine map. Layer norm sits between the affine output and the activation
// and carries learned gain/shift. Dropout only applies in train mode.
struct NetworkSpec {
  int input_dim = 1;
  int hidden_dim = 1;
  int num_hidden_layers = 0;
  int output_dim = 1;
  double dropout_prob = 0.0;
  bool layer_norm = false;

  void validate() const;
  int layer_count() const { return num_hidden_layers + 1; }
  int layer_input_dim(int layer) const { return layer == 0 ? input_dim : hidden_dim; }
  int layer_output_dim(int layer) const {
    return layer == num_hidden_layers ? output_dim : hidden_dim;
  }
};

inline constexpr double kLayerNormEps = 1e-5;

struct LayerParams {
  Matrix weight;  // input_dim x output_dim
  Vector bias;    // output_dim
  Vector gain;    // layer-norm gain, empty unless normalized hidden layer
  Vector shift;   // layer-norm shift, ditto
};

struct NetworkParams {
  std::vector<LayerParams> layers;

  // He-style init: weights N(0, 2/fan_in), biases 0, gain 1, shift 0.
  static NetworkParams init(const NetworkSpec& spec, Rng& rng);
  static NetworkParams zeros(const NetworkSpec& spec);
};

// Flat named view over one coefficient block. Optimizers, checkpoints and
// finite-difference probes all iterate blocks in this fixed order.
struct ParamBlock {
  std::string name;
  double* data = nullptr;
  std::size_t size = 0;
};

std::vector<ParamBlock> param_blocks(NetworkParams& params, const std::string& prefix = "");
std::size_t param_count(const NetworkParams& params);
// dst += scale * src, blockwise.
void axpy(NetworkParams& dst, const NetworkParams& src, double scale);

struct LayerCache {
  Matrix input;       // batch x in
  Matrix normalized;  // (z - mean) * inv_std, hidden LN layers only
  Vector inv_std;     // per row
  Matrix pre_act;     // activation input (post LN gain/shift, or the affine output)
  Matrix mask;        // scaled dropout mask, empty when inactive
};

struct ForwardCache {
  Mode mode = Mode::kEval;
  std::vector<LayerCache> layers;
};

struct ForwardResult {
  Matrix output;  // batch x output_dim
  ForwardCache cache;
};

// rng is only consumed for dropout masks (train mode, dropout_prob > 0).
ForwardResult forward(const NetworkSpec& spec, const NetworkParams& params,
                      const Matrix& inputs, Mode mode, Rng* rng = nullptr);
Matrix forward_eval(const NetworkSpec& spec, const NetworkParams& params,
                    const Matrix& inputs);

struct BackwardResult {
  NetworkParams param_grads;
  Matrix input_grads;  // batch x input_dim
};

// Exact reverse pass through the cached forward. Dropout reuses the cached
// mask; the clamp in the losses is handled at the loss layer, not here.
BackwardResult backward(const NetworkSpec& spec, const NetworkParams& params,
                        const ForwardCache& cache, const Matrix& output_grads);

// ---- losses and pointwise helpers ----

inline constexpr double kProbClamp = 1e-7;  // probabilities clamped to [eps, 1-eps]

double sigmoid(double z);
// Numerically stable softplus, log(1 + e^z).
double softplus(double z);

// Clamped binary cross entropy, -[y log p + (1-y) log(1-p)].
double binary_cross_entropy(double p, int y);
// Mean BCE across output dimensions of one sample.
double multi_output_mean_bce(const Eigen::Ref<const Vector>& probs,
                             const Eigen::Ref<const Vector>& labels);
// d(BCE)/d(logit) for p = sigmoid(logit): p - y on the interior, exactly 0
// where the clamp binds (the clamped forward is constant there).
double bce_logit_grad(double p, double label);

Eigen::Vector2d softmax2(const Eigen::Vector2d& logits);
double softmax2_cross_entropy(const Eigen::Vector2d& logits, int y);
Eigen::Vector2d softmax2_cross_entropy_grad(const Eigen::Vector2d& logits, int y);

// Identity on values; gradients are dropped across this boundary. There is no
// dynamic graph here, so the freeze is realized at the call sites assembling
// losses: terms flowing through a stopped value contribute no parameter
// gradients (see the counterfactual-gradient gate in the fair trainer).
template <typename T>
T stop_gradient(T value) {
  return value;
}

// ---- Adam ----

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment accumulators mirror the parameter blocks they were
// first applied to; reusing a state across differently-shaped blocks throws.
struct AdamState {
  AdamConfig config;
  long step = 0;
  std::vector<Eigen::ArrayXd> m;
  std::vector<Eigen::ArrayXd> v;
};

void adam_step(AdamState& state, const std::vector<ParamBlock>& params,
               const std::vector<ParamBlock>& grads);

}  // namespace cfodds::net
