#include "cfodds/net.hpp"

#include <algorithm>

namespace cfodds::net {

void NetworkSpec::validate() const {
  if (input_dim <= 0) throw ConfigError("network input_dim must be positive");
  if (output_dim <= 0) throw ConfigError("network output_dim must be positive");
  if (num_hidden_layers < 0) throw ConfigError("num_hidden_layers must be >= 0");
  if (num_hidden_layers > 0 && hidden_dim <= 0)
    throw ConfigError("hidden_dim must be positive when hidden layers exist");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0))
    throw ConfigError("dropout_prob must lie in [0, 1)");
}

NetworkParams NetworkParams::init(const NetworkSpec& spec, Rng& rng) {
  spec.validate();
  NetworkParams p;
  p.layers.resize(spec.layer_count());
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int in = spec.layer_input_dim(l);
    const int out = spec.layer_output_dim(l);
    auto& layer = p.layers[l];
    layer.weight.resize(in, out);
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (int j = 0; j < out; ++j)
      for (int i = 0; i < in; ++i) layer.weight(i, j) = rng.normal() * scale;
    layer.bias = Vector::Zero(out);
    if (spec.layer_norm && l < spec.num_hidden_layers) {
      layer.gain = Vector::Ones(out);
      layer.shift = Vector::Zero(out);
    }
  }
  return p;
}

NetworkParams NetworkParams::zeros(const NetworkSpec& spec) {
  spec.validate();
  NetworkParams p;
  p.layers.resize(spec.layer_count());
  for (int l = 0; l < spec.layer_count(); ++l) {
    auto& layer = p.layers[l];
    layer.weight = Matrix::Zero(spec.layer_input_dim(l), spec.layer_output_dim(l));
    layer.bias = Vector::Zero(spec.layer_output_dim(l));
    if (spec.layer_norm && l < spec.num_hidden_layers) {
      layer.gain = Vector::Zero(spec.layer_output_dim(l));
      layer.shift = Vector::Zero(spec.layer_output_dim(l));
    }
  }
  return p;
}

std::vector<ParamBlock> param_blocks(NetworkParams& params, const std::string& prefix) {
  std::vector<ParamBlock> blocks;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& layer = params.layers[l];
    const std::string base = prefix + "layer" + std::to_string(l) + ".";
    blocks.push_back({base + "weight", layer.weight.data(),
                      static_cast<std::size_t>(layer.weight.size())});
    blocks.push_back({base + "bias", layer.bias.data(),
                      static_cast<std::size_t>(layer.bias.size())});
    if (layer.gain.size() > 0) {
      blocks.push_back({base + "gain", layer.gain.data(),
                        static_cast<std::size_t>(layer.gain.size())});
      blocks.push_back({base + "shift", layer.shift.data(),
                        static_cast<std::size_t>(layer.shift.size())});
    }
  }
  return blocks;
}

std::size_t param_count(const NetworkParams& params) {
  std::size_t n = 0;
  for (const auto& layer : params.layers)
    n += layer.weight.size() + layer.bias.size() + layer.gain.size() + layer.shift.size();
  return n;
}

void axpy(NetworkParams& dst, const NetworkParams& src, double scale) {
  if (dst.layers.size() != src.layers.size())
    throw ShapeError("axpy: mismatched layer counts");
  for (std::size_t l = 0; l < dst.layers.size(); ++l) {
    dst.layers[l].weight += scale * src.layers[l].weight;
    dst.layers[l].bias += scale * src.layers[l].bias;
    if (dst.layers[l].gain.size() > 0) {
      dst.layers[l].gain += scale * src.layers[l].gain;
      dst.layers[l].shift += scale * src.layers[l].shift;
    }
  }
}

ForwardResult forward(const NetworkSpec& spec, const NetworkParams& params,
                      const Matrix& inputs, Mode mode, Rng* rng) {
  spec.validate();
  if (inputs.cols() != spec.input_dim)
    throw ShapeError("forward: input has " + std::to_string(inputs.cols()) +
                     " columns, spec expects " + std::to_string(spec.input_dim));
  if (static_cast<int>(params.layers.size()) != spec.layer_count())
    throw ShapeError("forward: params do not match spec layer count");
  const bool drop = mode == Mode::kTrain && spec.dropout_prob > 0.0;
  if (drop && rng == nullptr)
    throw ConfigError("forward: train-mode dropout requires an rng");

  ForwardResult res;
  res.cache.mode = mode;
  res.cache.layers.resize(spec.layer_count());

  Matrix x = inputs;
  for (int l = 0; l < spec.num_hidden_layers; ++l) {
    const auto& layer = params.layers[l];
    auto& cache = res.cache.layers[l];
    cache.input = x;

    Matrix z = (x * layer.weight).rowwise() + layer.bias.transpose();

    if (spec.layer_norm) {
      const int h = static_cast<int>(z.cols());
      cache.normalized.resize(z.rows(), z.cols());
      cache.inv_std.resize(z.rows());
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double mean = z.row(r).mean();
        const double var = (z.row(r).array() - mean).square().sum() / h;
        const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.inv_std(r) = inv_std;
        cache.normalized.row(r) = ((z.row(r).array() - mean) * inv_std).matrix();
      }
      cache.pre_act = ((cache.normalized.array().rowwise() *
                        layer.gain.transpose().array())
                           .rowwise() +
                       layer.shift.transpose().array())
                          .matrix();
    } else {
      cache.pre_act = std::move(z);
    }

    Matrix h = cache.pre_act.cwiseMax(0.0);

    if (drop) {
      const double keep = 1.0 - spec.dropout_prob;
      cache.mask.resize(h.rows(), h.cols());
      for (Eigen::Index r = 0; r < h.rows(); ++r)
        for (Eigen::Index c = 0; c < h.cols(); ++c)
          cache.mask(r, c) = rng->uniform() < keep ? 1.0 / keep : 0.0;
      x = h.cwiseProduct(cache.mask);
    } else {
      x = std::move(h);
    }
  }

  const int last = spec.num_hidden_layers;
  res.cache.layers[last].input = x;
  res.output = (x * params.layers[last].weight).rowwise() +
               params.layers[last].bias.transpose();
  return res;
}

Matrix forward_eval(const NetworkSpec& spec, const NetworkParams& params,
                    const Matrix& inputs) {
  return forward(spec, params, inputs, Mode::kEval, nullptr).output;
}

BackwardResult backward(const NetworkSpec& spec, const NetworkParams& params,
                        const ForwardCache& cache, const Matrix& output_grads) {
  if (static_cast<int>(cache.layers.size()) != spec.layer_count())
    throw ShapeError("backward: cache does not match spec layer count");
  if (output_grads.cols() != spec.output_dim)
    throw ShapeError("backward: output_grads has wrong width");

  BackwardResult res;
  res.param_grads.layers.resize(spec.layer_count());

  // Final affine.
  const int last = spec.num_hidden_layers;
  Matrix g = output_grads;  // gradient wrt current layer's output
  {
    const auto& in = cache.layers[last].input;
    res.param_grads.layers[last].weight = in.transpose() * g;
    res.param_grads.layers[last].bias = g.colwise().sum().transpose();
    g = g * params.layers[last].weight.transpose();
  }

  for (int l = spec.num_hidden_layers - 1; l >= 0; --l) {
    const auto& layer = params.layers[l];
    const auto& c = cache.layers[l];
    auto& grads = res.param_grads.layers[l];

    if (c.mask.size() > 0) g = g.cwiseProduct(c.mask);

    // ReLU gate on the cached activation input.
    g = ((c.pre_act.array() > 0.0).cast<double>() * g.array()).matrix();

    if (spec.layer_norm) {
      grads.gain = (g.array() * c.normalized.array()).colwise().sum().transpose().matrix();
      grads.shift = g.colwise().sum().transpose();

      // dz = inv_std * (dxh - mean(dxh) - xh * mean(dxh . xh)), biased variance.
      Matrix dxh = (g.array().rowwise() * layer.gain.transpose().array()).matrix();
      Matrix dz(dxh.rows(), dxh.cols());
      for (Eigen::Index r = 0; r < dxh.rows(); ++r) {
        const double mean_d = dxh.row(r).mean();
        const double mean_dx = (dxh.row(r).array() * c.normalized.row(r).array()).mean();
        dz.row(r) = (c.inv_std(r) * (dxh.row(r).array() - mean_d -
                                     c.normalized.row(r).array() * mean_dx))
                        .matrix();
      }
      g = std::move(dz);
    }

    grads.weight = c.input.transpose() * g;
    grads.bias = g.colwise().sum().transpose();
    g = g * layer.weight.transpose();
  }

  res.input_grads = std::move(g);
  return res;
}

double sigmoid(double z) {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) {
  if (z > 30.0) return z;
  if (z < -30.0) return std::exp(z);
  return std::log1p(std::exp(z));
}

double binary_cross_entropy(double p, int y) {
  if (y != 0 && y != 1) throw ConfigError("binary_cross_entropy label must be 0 or 1");
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return y == 1 ? -std::log(q) : -std::log(1.0 - q);
}

double multi_output_mean_bce(const Eigen::Ref<const Vector>& probs,
                             const Eigen::Ref<const Vector>& labels) {
  if (probs.size() != labels.size())
    throw ShapeError("multi_output_mean_bce: size mismatch");
  if (probs.size() == 0) throw ShapeError("multi_output_mean_bce: empty input");
  double total = 0.0;
  for (Eigen::Index j = 0; j < probs.size(); ++j)
    total += binary_cross_entropy(probs(j), labels(j) > 0.5 ? 1 : 0);
  return total / static_cast<double>(probs.size());
}

double bce_logit_grad(double p, double label) {
  if (p <= kProbClamp || p >= 1.0 - kProbClamp) return 0.0;
  return p - label;
}

Eigen::Vector2d softmax2(const Eigen::Vector2d& logits) {
  const double mx = logits.maxCoeff();
  Eigen::Vector2d e = (logits.array() - mx).exp();
  return e / e.sum();
}

double softmax2_cross_entropy(const Eigen::Vector2d& logits, int y) {
  if (y != 0 && y != 1) throw ConfigError("softmax2_cross_entropy label must be 0 or 1");
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log(std::exp(logits(0) - mx) + std::exp(logits(1) - mx));
  return lse - logits(y);
}

Eigen::Vector2d softmax2_cross_entropy_grad(const Eigen::Vector2d& logits, int y) {
  Eigen::Vector2d g = softmax2(logits);
  g(y) -= 1.0;
  return g;
}

void adam_step(AdamState& state, const std::vector<ParamBlock>& params,
               const std::vector<ParamBlock>& grads) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: param/grad block count mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t b = 0; b < params.size(); ++b) {
      state.m[b] = Eigen::ArrayXd::Zero(params[b].size);
      state.v[b] = Eigen::ArrayXd::Zero(params[b].size);
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state does not match block count");

  ++state.step;
  const auto& cfg = state.config;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size != grads[b].size ||
        state.m[b].size() != static_cast<Eigen::Index>(params[b].size))
      throw ShapeError("adam_step: block '" + params[b].name + "' shape mismatch");
    Eigen::Map<Eigen::ArrayXd> p(params[b].data, params[b].size);
    Eigen::Map<const Eigen::ArrayXd> g(grads[b].data, grads[b].size);
    auto& m = state.m[b];
    auto& v = state.v[b];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    p -= cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
  }
}

}  // namespace cfodds::net
