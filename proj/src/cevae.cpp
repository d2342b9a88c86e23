#include "cfodds/cevae.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cfodds::cevae {

using net::Mode;

void CevaeSpec::validate() const {
  if (feature_dim <= 0) throw ConfigError("cevae feature_dim must be positive");
  if (group_count <= 0) throw ConfigError("cevae group_count must be positive");
  if (latent_dim <= 0) throw ConfigError("cevae latent_dim must be positive");
  if (group_embedding_dim <= 0)
    throw ConfigError("cevae group_embedding_dim must be positive");
  encoder.validate();
  decoder_x.validate();
  decoder_y.validate();
  if (encoder.input_dim != feature_dim + group_count)
    throw ShapeError("cevae encoder input must be feature_dim + group_count");
  if (encoder.output_dim != 2 * latent_dim)
    throw ShapeError("cevae encoder output must be 2 * latent_dim");
  if (decoder_x.input_dim != latent_dim + group_embedding_dim ||
      decoder_y.input_dim != latent_dim + group_embedding_dim)
    throw ShapeError("cevae decoder inputs must be latent_dim + group_embedding_dim");
  if (decoder_x.output_dim != feature_dim)
    throw ShapeError("cevae decoder_x output must be feature_dim");
  if (decoder_y.output_dim != 1)
    throw ShapeError("cevae decoder_y output must be 1");
  for (double l : {lambda_x, lambda_y, lambda_mmd, lambda_mmd_a})
    if (!(l >= 0.0)) throw ConfigError("cevae loss weights must be nonnegative");
  if (bandwidth_policy == BandwidthPolicy::kFixed && !(fixed_bandwidth > 0.0))
    throw ConfigError("cevae fixed bandwidth must be positive");
  if (min_group_size < 1) throw ConfigError("cevae min_group_size must be >= 1");
}

CevaeSpec CevaeSpec::make(int feature_dim, int group_count, int latent_dim,
                          int group_embedding_dim, int hidden_dim,
                          int num_hidden_layers, double dropout_prob,
                          bool layer_norm) {
  CevaeSpec spec;
  spec.feature_dim = feature_dim;
  spec.group_count = group_count;
  spec.latent_dim = latent_dim;
  spec.group_embedding_dim = group_embedding_dim;

  auto net_spec = [&](int in, int out) {
    net::NetworkSpec s;
    s.input_dim = in;
    s.hidden_dim = hidden_dim;
    s.num_hidden_layers = num_hidden_layers;
    s.output_dim = out;
    s.dropout_prob = dropout_prob;
    s.layer_norm = layer_norm;
    return s;
  };
  spec.encoder = net_spec(feature_dim + group_count, 2 * latent_dim);
  spec.decoder_x = net_spec(latent_dim + group_embedding_dim, feature_dim);
  spec.decoder_y = net_spec(latent_dim + group_embedding_dim, 1);
  spec.validate();
  return spec;
}

CevaeParams CevaeParams::init(const CevaeSpec& spec, Rng& rng) {
  spec.validate();
  CevaeParams p;
  p.encoder = net::NetworkParams::init(spec.encoder, rng);
  p.decoder_x = net::NetworkParams::init(spec.decoder_x, rng);
  p.decoder_y = net::NetworkParams::init(spec.decoder_y, rng);
  p.embedding.resize(spec.group_count, spec.group_embedding_dim);
  for (int k = 0; k < spec.group_count; ++k)
    for (int e = 0; e < spec.group_embedding_dim; ++e)
      p.embedding(k, e) = 0.01 * rng.normal();
  return p;
}

CevaeParams CevaeParams::zeros(const CevaeSpec& spec) {
  spec.validate();
  CevaeParams p;
  p.encoder = net::NetworkParams::zeros(spec.encoder);
  p.decoder_x = net::NetworkParams::zeros(spec.decoder_x);
  p.decoder_y = net::NetworkParams::zeros(spec.decoder_y);
  p.embedding = Matrix::Zero(spec.group_count, spec.group_embedding_dim);
  return p;
}

std::vector<net::ParamBlock> param_blocks(CevaeParams& params) {
  std::vector<net::ParamBlock> blocks = net::param_blocks(params.encoder, "encoder.");
  auto dx = net::param_blocks(params.decoder_x, "decoder_x.");
  auto dy = net::param_blocks(params.decoder_y, "decoder_y.");
  blocks.insert(blocks.end(), dx.begin(), dx.end());
  blocks.insert(blocks.end(), dy.begin(), dy.end());
  blocks.push_back({"embedding", params.embedding.data(),
                    static_cast<std::size_t>(params.embedding.size())});
  return blocks;
}

namespace {

Matrix encoder_input(const CevaeSpec& spec, const Matrix& x,
                     std::span<const int> a) {
  Matrix in = Matrix::Zero(x.rows(), spec.feature_dim + spec.group_count);
  in.leftCols(spec.feature_dim) = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (a[i] < 0 || a[i] >= spec.group_count)
      throw ConfigError("attribute value " + std::to_string(a[i]) +
                        " outside [0, " + std::to_string(spec.group_count) + ")");
    in(i, spec.feature_dim + a[i]) = 1.0;
  }
  return in;
}

Matrix decoder_input(const CevaeSpec& spec, const CevaeParams& params,
                     const Matrix& u, std::span<const int> a) {
  Matrix in(u.rows(), spec.latent_dim + spec.group_embedding_dim);
  in.leftCols(spec.latent_dim) = u;
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    in.row(i).tail(spec.group_embedding_dim) = params.embedding.row(a[i]);
  return in;
}

Matrix dense_row(const CevaeSpec& spec, std::span<const std::int32_t> x_indices) {
  Matrix x = Matrix::Zero(1, spec.feature_dim);
  for (std::int32_t j : x_indices) {
    if (j < 0 || j >= spec.feature_dim)
      throw ConfigError("feature index " + std::to_string(j) + " out of range");
    x(0, j) = 1.0;
  }
  return x;
}

// Pairwise squared Euclidean distances, row i of P against row j of Q.
Matrix sq_dist(const Matrix& p, const Matrix& q) {
  Matrix d = -2.0 * p * q.transpose();
  d.colwise() += p.rowwise().squaredNorm();
  d.rowwise() += q.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

double median_bandwidth(const Matrix& u) {
  const Eigen::Index n = u.rows();
  if (n < 2) return 1.0;
  const Matrix d = sq_dist(u, u);
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) dists.push_back(std::sqrt(d(i, j)));
  auto mid = dists.begin() + dists.size() / 2;
  std::nth_element(dists.begin(), mid, dists.end());
  double med = *mid;
  if (dists.size() % 2 == 0) {
    auto lo = std::max_element(dists.begin(), mid);
    med = 0.5 * (med + *lo);
  }
  return med > 0.0 ? med : 1.0;
}

struct MmdTerm {
  double value = 0.0;  // clamped at zero
  bool clamped = false;
  Matrix k_pp, k_pq;
  Vector rowsum_pp, rowsum_pq;
};

MmdTerm mmd_forward(const Matrix& p, const Matrix& q, double bandwidth) {
  MmdTerm t;
  const double scale = -0.5 / (bandwidth * bandwidth);
  t.k_pp = (sq_dist(p, p) * scale).array().exp().matrix();
  t.k_pq = (sq_dist(p, q) * scale).array().exp().matrix();
  const Matrix k_qq = (sq_dist(q, q) * scale).array().exp().matrix();
  const double raw = t.k_pp.mean() + k_qq.mean() - 2.0 * t.k_pq.mean();
  t.clamped = raw < 0.0;
  t.value = t.clamped ? 0.0 : raw;
  t.rowsum_pp = t.k_pp.rowwise().sum();
  t.rowsum_pq = t.k_pq.rowwise().sum();
  return t;
}

// Gradient of the (unclamped) squared MMD with respect to the rows of P;
// Q and the bandwidth are constants here.
Matrix mmd_backward(const MmdTerm& t, const Matrix& p, const Matrix& q,
                    double bandwidth) {
  if (t.clamped) return Matrix::Zero(p.rows(), p.cols());
  const double n = static_cast<double>(p.rows());
  const double m = static_cast<double>(q.rows());
  const double c = 2.0 / (bandwidth * bandwidth);
  Matrix grad = (t.k_pp * p - t.rowsum_pp.asDiagonal() * p) / (n * n);
  grad -= (t.k_pq * q - t.rowsum_pq.asDiagonal() * p) / (n * m);
  return c * grad;
}

// Everything cevae_loss needs to produce a value, retained so the backward
// pass can reuse it without replaying the random stream.
struct LossState {
  Matrix enc_in;
  net::ForwardResult enc;
  Matrix mu, raw, sigma, eps, u;
  std::vector<int> a;
  Matrix dec_in;
  net::ForwardResult dec_x;
  net::ForwardResult dec_y;
  Matrix px;  // n x m probabilities
  Vector py;  // n
  double bandwidth = 0.0;
  Matrix prior;
  MmdTerm mmd_all;
  struct GroupTerm {
    int group = 0;
    std::vector<Eigen::Index> rows;
    Matrix u_rows, prior_rows;
    MmdTerm term;
  };
  std::vector<GroupTerm> groups;
  LossComponents components;
};

LossState loss_forward(const CevaeSpec& spec, const CevaeParams& params,
                       const Batch& batch, std::uint64_t seed, Mode mode) {
  spec.validate();
  const Eigen::Index n = batch.x.rows();
  if (n == 0) throw ConfigError("cevae_loss requires a nonempty batch");
  if (batch.x.cols() != spec.feature_dim)
    throw ShapeError("cevae_loss batch features have wrong width");
  if (static_cast<Eigen::Index>(batch.a.size()) != n || batch.y.size() != n)
    throw ShapeError("cevae_loss batch fields disagree on length");

  Rng rng(seed);
  LossState s;
  s.a = batch.a;

  const int d = spec.latent_dim;
  s.enc_in = encoder_input(spec, batch.x, batch.a);
  s.enc = net::forward(spec.encoder, params.encoder, s.enc_in, mode, &rng);
  s.mu = s.enc.output.leftCols(d);
  s.raw = s.enc.output.rightCols(d);
  s.sigma = s.raw.unaryExpr([](double r) { return net::softplus(r); });

  s.eps.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int t = 0; t < d; ++t) s.eps(i, t) = rng.normal();
  s.u = s.mu + s.sigma.cwiseProduct(s.eps);

  s.dec_in = decoder_input(spec, params, s.u, batch.a);
  s.dec_x = net::forward(spec.decoder_x, params.decoder_x, s.dec_in, mode, &rng);
  s.dec_y = net::forward(spec.decoder_y, params.decoder_y, s.dec_in, mode, &rng);
  s.px = s.dec_x.output.unaryExpr([](double z) { return net::sigmoid(z); });
  s.py = s.dec_y.output.col(0).unaryExpr([](double z) { return net::sigmoid(z); });

  auto& c = s.components;
  for (Eigen::Index i = 0; i < n; ++i) {
    c.recon_x += net::multi_output_mean_bce(s.px.row(i).transpose(),
                                            batch.x.row(i).transpose());
    c.recon_y += net::binary_cross_entropy(s.py(i), batch.y(i) > 0.5 ? 1 : 0);
  }
  c.recon_x /= static_cast<double>(n);
  c.recon_y /= static_cast<double>(n);

  s.bandwidth = spec.bandwidth_policy == BandwidthPolicy::kFixed
                    ? spec.fixed_bandwidth
                    : median_bandwidth(s.u);
  c.bandwidth = s.bandwidth;

  s.prior.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int t = 0; t < d; ++t) s.prior(i, t) = rng.normal();
  s.mmd_all = mmd_forward(s.u, s.prior, s.bandwidth);
  c.mmd = s.mmd_all.value;

  for (int k = 0; k < spec.group_count; ++k) {
    LossState::GroupTerm g;
    g.group = k;
    for (Eigen::Index i = 0; i < n; ++i)
      if (batch.a[i] == k) g.rows.push_back(i);
    if (static_cast<int>(g.rows.size()) < spec.min_group_size) continue;
    const Eigen::Index nk = static_cast<Eigen::Index>(g.rows.size());
    g.u_rows.resize(nk, d);
    for (Eigen::Index r = 0; r < nk; ++r) g.u_rows.row(r) = s.u.row(g.rows[r]);
    g.prior_rows.resize(nk, d);
    for (Eigen::Index r = 0; r < nk; ++r)
      for (int t = 0; t < d; ++t) g.prior_rows(r, t) = rng.normal();
    g.term = mmd_forward(g.u_rows, g.prior_rows, s.bandwidth);
    c.mmd_per_group += g.term.value;
    s.groups.push_back(std::move(g));
  }

  c.total = spec.lambda_x * c.recon_x + spec.lambda_y * c.recon_y +
            spec.lambda_mmd * c.mmd + spec.lambda_mmd_a * c.mmd_per_group;
  return s;
}

CevaeParams loss_backward(const CevaeSpec& spec, const CevaeParams& params,
                          const Batch& batch, const LossState& s) {
  const Eigen::Index n = batch.x.rows();
  const int d = spec.latent_dim;
  const int e = spec.group_embedding_dim;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_nm = inv_n / static_cast<double>(spec.feature_dim);

  CevaeParams grads;

  // Reconstruction branches. The loss clamps probabilities, so the logit
  // gradient is zero wherever the clamp binds.
  Matrix dlx(n, spec.feature_dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < spec.feature_dim; ++j)
      dlx(i, j) = spec.lambda_x * inv_nm * net::bce_logit_grad(s.px(i, j), batch.x(i, j));
  auto back_x = net::backward(spec.decoder_x, params.decoder_x, s.dec_x.cache, dlx);
  grads.decoder_x = std::move(back_x.param_grads);

  Matrix dly(n, 1);
  for (Eigen::Index i = 0; i < n; ++i)
    dly(i, 0) = spec.lambda_y * inv_n * net::bce_logit_grad(s.py(i), batch.y(i));
  auto back_y = net::backward(spec.decoder_y, params.decoder_y, s.dec_y.cache, dly);
  grads.decoder_y = std::move(back_y.param_grads);

  Matrix dz = back_x.input_grads + back_y.input_grads;
  Matrix du = dz.leftCols(d);

  if (spec.lambda_mmd > 0.0)
    du += spec.lambda_mmd * mmd_backward(s.mmd_all, s.u, s.prior, s.bandwidth);
  if (spec.lambda_mmd_a > 0.0) {
    for (const auto& g : s.groups) {
      const Matrix dg = mmd_backward(g.term, g.u_rows, g.prior_rows, s.bandwidth);
      for (Eigen::Index r = 0; r < dg.rows(); ++r)
        du.row(g.rows[r]) += spec.lambda_mmd_a * dg.row(r);
    }
  }

  grads.embedding = Matrix::Zero(spec.group_count, e);
  for (Eigen::Index i = 0; i < n; ++i)
    grads.embedding.row(s.a[i]) += dz.row(i).tail(e);

  // Reparameterization: u = mu + softplus(raw) .* eps.
  Matrix denc(n, 2 * d);
  denc.leftCols(d) = du;
  denc.rightCols(d) =
      du.cwiseProduct(s.eps).cwiseProduct(s.raw.unaryExpr([](double r) {
        return net::sigmoid(r);
      }));
  auto back_enc = net::backward(spec.encoder, params.encoder, s.enc.cache, denc);
  grads.encoder = std::move(back_enc.param_grads);
  return grads;
}

}  // namespace

GaussianPosterior encode(const CevaeSpec& spec, const CevaeParams& params,
                         std::span<const std::int32_t> x_indices, int a) {
  spec.validate();
  if (a < 0 || a >= spec.group_count)
    throw ConfigError("encode: attribute out of range");
  Matrix x = dense_row(spec, x_indices);
  std::vector<int> av{a};
  const Matrix out =
      net::forward_eval(spec.encoder, params.encoder, encoder_input(spec, x, av));
  GaussianPosterior post;
  post.mu = out.row(0).head(spec.latent_dim).transpose();
  post.sigma = out.row(0)
                   .tail(spec.latent_dim)
                   .unaryExpr([](double r) { return net::softplus(r); })
                   .transpose();
  return post;
}

Vector sample_latent(const GaussianPosterior& posterior, Rng& rng) {
  Vector u(posterior.mu.size());
  for (Eigen::Index t = 0; t < u.size(); ++t)
    u(t) = posterior.mu(t) + posterior.sigma(t) * rng.normal();
  return u;
}

Vector decode_x(const CevaeSpec& spec, const CevaeParams& params, const Vector& u,
                int a) {
  if (a < 0 || a >= spec.group_count)
    throw ConfigError("decode_x: attribute out of range");
  if (u.size() != spec.latent_dim) throw ShapeError("decode_x: latent has wrong size");
  std::vector<int> av{a};
  const Matrix out = net::forward_eval(spec.decoder_x, params.decoder_x,
                                       decoder_input(spec, params, u.transpose(), av));
  return out.row(0).unaryExpr([](double z) { return net::sigmoid(z); }).transpose();
}

double decode_y(const CevaeSpec& spec, const CevaeParams& params, const Vector& u,
                int a) {
  if (a < 0 || a >= spec.group_count)
    throw ConfigError("decode_y: attribute out of range");
  if (u.size() != spec.latent_dim) throw ShapeError("decode_y: latent has wrong size");
  std::vector<int> av{a};
  const Matrix out = net::forward_eval(spec.decoder_y, params.decoder_y,
                                       decoder_input(spec, params, u.transpose(), av));
  return net::sigmoid(out(0, 0));
}

void encode_batch(const CevaeSpec& spec, const CevaeParams& params,
                  const Matrix& x_dense, std::span<const int> a, Matrix& mu,
                  Matrix& sigma) {
  if (x_dense.cols() != spec.feature_dim)
    throw ShapeError("encode_batch: features have wrong width");
  if (static_cast<Eigen::Index>(a.size()) != x_dense.rows())
    throw ShapeError("encode_batch: attribute count mismatch");
  const Matrix out = net::forward_eval(spec.encoder, params.encoder,
                                       encoder_input(spec, x_dense, a));
  mu = out.leftCols(spec.latent_dim);
  sigma = out.rightCols(spec.latent_dim).unaryExpr([](double r) {
    return net::softplus(r);
  });
}

Vector decode_y_batch(const CevaeSpec& spec, const CevaeParams& params,
                      const Matrix& u, int a) {
  if (a < 0 || a >= spec.group_count)
    throw ConfigError("decode_y_batch: attribute out of range");
  if (u.cols() != spec.latent_dim)
    throw ShapeError("decode_y_batch: latent has wrong width");
  const std::vector<int> av(u.rows(), a);
  const Matrix out = net::forward_eval(spec.decoder_y, params.decoder_y,
                                       decoder_input(spec, params, u, av));
  return out.col(0).unaryExpr([](double z) { return net::sigmoid(z); });
}

double gaussian_kl(const GaussianPosterior& posterior) {
  if (posterior.mu.size() != posterior.sigma.size())
    throw ShapeError("gaussian_kl: mu and sigma sizes differ");
  double kl = 0.0;
  for (Eigen::Index t = 0; t < posterior.mu.size(); ++t) {
    const double s2 = posterior.sigma(t) * posterior.sigma(t);
    if (!(posterior.sigma(t) > 0.0))
      throw ConfigError("gaussian_kl requires positive sigma");
    kl += 0.5 * (s2 + posterior.mu(t) * posterior.mu(t) - 1.0 - std::log(s2));
  }
  return kl;
}

double mmd_sq(const Matrix& samples_p, const Matrix& samples_q, double bandwidth) {
  if (samples_p.rows() == 0 || samples_q.rows() == 0)
    throw ConfigError("mmd_sq requires nonempty sample sets");
  if (samples_p.cols() != samples_q.cols())
    throw ShapeError("mmd_sq sample sets must share dimensionality");
  if (!(bandwidth > 0.0)) throw ConfigError("mmd_sq bandwidth must be positive");
  return mmd_forward(samples_p, samples_q, bandwidth).value;
}

Batch make_batch(const data::Dataset& dataset,
                 std::span<const std::size_t> positions) {
  Batch b;
  const Eigen::Index n = static_cast<Eigen::Index>(positions.size());
  b.x = Matrix::Zero(n, dataset.feature_dim);
  b.a.resize(positions.size());
  b.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = dataset.samples.at(positions[i]);
    for (std::int32_t j : s.x) b.x(i, j) = 1.0;
    b.a[i] = s.a;
    b.y(i) = s.y;
  }
  return b;
}

LossComponents cevae_loss(const CevaeSpec& spec, const CevaeParams& params,
                          const Batch& batch, std::uint64_t seed, net::Mode mode) {
  return loss_forward(spec, params, batch, seed, mode).components;
}

LossComponents cevae_loss_backward(const CevaeSpec& spec, const CevaeParams& params,
                                   const Batch& batch, std::uint64_t seed,
                                   net::Mode mode, CevaeParams& grads) {
  const LossState s = loss_forward(spec, params, batch, seed, mode);
  grads = loss_backward(spec, params, batch, s);
  return s.components;
}

const CounterfactualSample& CounterfactualBundle::for_group(int a_target) const {
  for (const auto& cf : counterfactuals)
    if (cf.a_target == a_target) return cf;
  throw ConfigError("bundle has no counterfactual for group " +
                    std::to_string(a_target));
}

CounterfactualBundle sample_counterfactual_bundle(
    const CevaeSpec& spec, const CevaeParams& params,
    const data::LabeledSample& sample, LatentMode latent_mode, Rng& rng,
    bool sample_features) {
  CounterfactualBundle bundle;
  bundle.sample_id = sample.id;
  bundle.x = sample.x;
  bundle.a = sample.a;
  bundle.y = sample.y;

  bundle.has_features = sample_features;

  const GaussianPosterior post = encode(spec, params, sample.x, sample.a);
  bundle.u = latent_mode == LatentMode::kSampled ? sample_latent(post, rng) : post.mu;
  bundle.p_y_factual = decode_y(spec, params, bundle.u, sample.a);

  for (int k = 0; k < spec.group_count; ++k) {
    if (k == sample.a) continue;
    CounterfactualSample cf;
    cf.a_target = k;
    cf.p_y_cf = decode_y(spec, params, bundle.u, k);
    cf.y_cf = rng.uniform() < cf.p_y_cf ? 1 : 0;
    if (sample_features) {
      const Vector probs = decode_x(spec, params, bundle.u, k);
      for (int j = 0; j < spec.feature_dim; ++j)
        if (rng.uniform() < probs(j)) cf.x_cf.push_back(j);
    }
    bundle.counterfactuals.push_back(std::move(cf));
  }
  return bundle;
}

TrainCevaeResult train_cevae(const CevaeSpec& spec, const data::Dataset& dataset,
                             std::span<const std::int64_t> train_ids,
                             std::span<const std::int64_t> validation_ids,
                             const TrainCevaeOptions& options) {
  spec.validate();
  if (options.epochs < 0) throw ConfigError("train_cevae epochs must be >= 0");
  if (options.batch_size < 2) throw ConfigError("train_cevae batch_size must be >= 2");
  if (!(options.learning_rate > 0.0))
    throw ConfigError("train_cevae learning_rate must be positive");
  if (train_ids.empty()) throw ConfigError("train_cevae requires training samples");

  const auto index = data::index_by_id(dataset);
  auto to_positions = [&](std::span<const std::int64_t> ids) {
    std::vector<std::size_t> pos;
    pos.reserve(ids.size());
    for (auto id : ids) {
      const auto it = index.find(id);
      if (it == index.end())
        throw ConfigError("unknown sample id " + std::to_string(id));
      pos.push_back(it->second);
    }
    return pos;
  };
  const std::vector<std::size_t> train_pos = to_positions(train_ids);
  const std::vector<std::size_t> val_pos = to_positions(validation_ids);

  Rng init_rng(derive_seed(options.seed, "cevae-init"));
  TrainCevaeResult result;
  CevaeParams params = CevaeParams::init(spec, init_rng);
  result.params = params;

  net::AdamState adam;
  adam.config.learning_rate = options.learning_rate;

  auto validation_pass = [&](const CevaeParams& p) {
    LossComponents mean;
    if (val_pos.empty()) return mean;
    double weight = 0.0;
    std::uint64_t chunk = 0;
    for (std::size_t start = 0; start < val_pos.size();
         start += options.batch_size, ++chunk) {
      const std::size_t len =
          std::min<std::size_t>(options.batch_size, val_pos.size() - start);
      const Batch b = make_batch(
          dataset, std::span<const std::size_t>(val_pos.data() + start, len));
      const auto c = cevae_loss(spec, p, b,
                                derive_seed(options.seed, "cevae-val", chunk),
                                Mode::kEval);
      const double w = static_cast<double>(len);
      mean.recon_x += w * c.recon_x;
      mean.recon_y += w * c.recon_y;
      mean.mmd += w * c.mmd;
      mean.mmd_per_group += w * c.mmd_per_group;
      mean.total += w * c.total;
      mean.bandwidth += w * c.bandwidth;
      weight += w;
    }
    mean.recon_x /= weight;
    mean.recon_y /= weight;
    mean.mmd /= weight;
    mean.mmd_per_group /= weight;
    mean.total /= weight;
    mean.bandwidth /= weight;
    return mean;
  };

  double best_total = std::numeric_limits<double>::infinity();
  std::uint64_t global_step = 0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<std::size_t> order = train_pos;
    Rng shuffle_rng(derive_seed(options.seed, "cevae-shuffle", epoch));
    shuffle_rng.shuffle(order);

    LossComponents train_mean;
    double weight = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t len =
          std::min<std::size_t>(options.batch_size, order.size() - start);
      if (len < 2) break;  // a singleton tail has no MMD signal
      const Batch b =
          make_batch(dataset, std::span<const std::size_t>(order.data() + start, len));
      CevaeParams grads;
      const auto c = cevae_loss_backward(
          spec, params, b, derive_seed(options.seed, "cevae-step", global_step),
          Mode::kTrain, grads);
      if (!std::isfinite(c.total))
        throw DivergenceError("cevae training diverged at epoch " +
                              std::to_string(epoch) + " step " +
                              std::to_string(global_step) + " (total=" +
                              std::to_string(c.total) + ")");
      net::adam_step(adam, param_blocks(params), param_blocks(grads));
      ++global_step;

      const double w = static_cast<double>(len);
      train_mean.recon_x += w * c.recon_x;
      train_mean.recon_y += w * c.recon_y;
      train_mean.mmd += w * c.mmd;
      train_mean.mmd_per_group += w * c.mmd_per_group;
      train_mean.total += w * c.total;
      train_mean.bandwidth += w * c.bandwidth;
      weight += w;
    }
    if (weight > 0.0) {
      train_mean.recon_x /= weight;
      train_mean.recon_y /= weight;
      train_mean.mmd /= weight;
      train_mean.mmd_per_group /= weight;
      train_mean.total /= weight;
      train_mean.bandwidth /= weight;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train = train_mean;
    stats.validation = validation_pass(params);
    result.trace.push_back(stats);

    if (val_pos.empty()) {
      result.params = params;
      result.best_epoch = epoch;
    } else if (stats.validation.total < best_total) {
      best_total = stats.validation.total;
      result.params = params;
      result.best_epoch = epoch;
    }
  }
  return result;
}

}  // namespace cfodds::cevae
