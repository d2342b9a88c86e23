#include "cfodds/fair.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <thread>

namespace cfodds::fair {

using cevae::CounterfactualBundle;
using net::Mode;

void PredictorHandle::validate() const {
  spec.validate();
  if (group_count <= 0) throw ConfigError("predictor group_count must be positive");
  if (spec.output_dim != 2) throw ShapeError("predictor must emit two logits");
  if (input_mode == InputMode::kLatent && latent_dim <= 0)
    throw ConfigError("latent predictor needs latent_dim");
  if (input_mode == InputMode::kFeatures && feature_dim <= 0)
    throw ConfigError("feature predictor needs feature_dim");
  const int expect = input_mode == InputMode::kLatent
                         ? latent_dim + group_count
                         : feature_dim + group_count;
  if (spec.input_dim != expect)
    throw ShapeError("predictor input width " + std::to_string(spec.input_dim) +
                     " does not match its input mode (want " +
                     std::to_string(expect) + ")");
}

double positive_probability(const Eigen::Vector2d& logits) {
  return net::softmax2(logits)(1);
}

double clp_term(const Eigen::Vector2d& factual_logits,
                const Eigen::Vector2d& counterfactual_logits, int y_factual,
                int y_counterfactual) {
  if (y_factual != y_counterfactual) return 0.0;
  return 0.5 * (factual_logits - counterfactual_logits).squaredNorm();
}

namespace {

Matrix one_hot_block(std::span<const int> a, int group_count) {
  Matrix block = Matrix::Zero(static_cast<Eigen::Index>(a.size()), group_count);
  for (Eigen::Index i = 0; i < block.rows(); ++i) {
    if (a[i] < 0 || a[i] >= group_count)
      throw ConfigError("attribute value out of range in predictor input");
    block(i, a[i]) = 1.0;
  }
  return block;
}

// [payload | onehot(a)] with a constant or per-row attribute.
Matrix predictor_input(const Matrix& payload, std::span<const int> a,
                       int group_count) {
  Matrix in(payload.rows(), payload.cols() + group_count);
  in.leftCols(payload.cols()) = payload;
  in.rightCols(group_count) = one_hot_block(a, group_count);
  return in;
}

Matrix bundle_payload(const PredictorHandle& handle,
                      const CounterfactualBundle& bundle, int cf_index) {
  if (handle.input_mode == InputMode::kLatent) {
    if (bundle.u.size() != handle.latent_dim)
      throw ShapeError("bundle latent width does not match predictor");
    return bundle.u.transpose();
  }
  if (cf_index >= 0 && !bundle.has_features)
    throw ConfigError(
        "feature-mode scoring needs bundles sampled with counterfactual features");
  Matrix x = Matrix::Zero(1, handle.feature_dim);
  const auto& idx =
      cf_index < 0 ? bundle.x : bundle.counterfactuals.at(cf_index).x_cf;
  for (std::int32_t j : idx) {
    if (j < 0 || j >= handle.feature_dim)
      throw ConfigError("bundle feature index out of range for predictor");
    x(0, j) = 1.0;
  }
  return x;
}

Eigen::Vector2d single_logits(const PredictorHandle& handle, const Matrix& payload,
                              int a) {
  const std::vector<int> av{a};
  const Matrix out = net::forward_eval(
      handle.spec, handle.params, predictor_input(payload, av, handle.group_count));
  return out.row(0).transpose();
}

}  // namespace

BundleScores score_bundle(const PredictorHandle& handle,
                          const CounterfactualBundle& bundle) {
  handle.validate();
  BundleScores s;
  s.factual_logits = single_logits(handle, bundle_payload(handle, bundle, -1), bundle.a);
  s.p_factual = positive_probability(s.factual_logits);
  s.cf_logits.reserve(bundle.counterfactuals.size());
  s.p_cf.reserve(bundle.counterfactuals.size());
  for (std::size_t c = 0; c < bundle.counterfactuals.size(); ++c) {
    const auto logits =
        single_logits(handle, bundle_payload(handle, bundle, static_cast<int>(c)),
                      bundle.counterfactuals[c].a_target);
    s.cf_logits.push_back(logits);
    s.p_cf.push_back(positive_probability(logits));
  }
  return s;
}

std::vector<BundleScores> score_bundles(
    const PredictorHandle& handle,
    std::span<const cevae::CounterfactualBundle> bundles) {
  std::vector<BundleScores> out;
  out.reserve(bundles.size());
  for (const auto& b : bundles) out.push_back(score_bundle(handle, b));
  return out;
}

FairLossComponents fair_loss(const PredictorHandle& handle,
                             const CounterfactualBundle& bundle, double lambda_cf,
                             double lambda_clp, bool cf_gradients) {
  (void)cf_gradients;  // values are unaffected; the flag gates gradients only
  const BundleScores s = score_bundle(handle, bundle);
  FairLossComponents c;
  c.factual_ce = net::softmax2_cross_entropy(s.factual_logits, bundle.y);
  for (std::size_t j = 0; j < bundle.counterfactuals.size(); ++j) {
    const auto& cf = bundle.counterfactuals[j];
    c.cf_ce += net::softmax2_cross_entropy(s.cf_logits[j], cf.y_cf);
    c.clp += clp_term(s.factual_logits, s.cf_logits[j], bundle.y, cf.y_cf);
  }
  c.total = c.factual_ce + lambda_cf * c.cf_ce + lambda_clp * c.clp;
  return c;
}

FairLossComponents fair_loss_with_grads(const PredictorHandle& handle,
                                        const CounterfactualBundle& bundle,
                                        double lambda_cf, double lambda_clp,
                                        bool cf_gradients,
                                        net::NetworkParams& grads) {
  handle.validate();
  const std::vector<int> af{bundle.a};
  const Matrix in_f =
      predictor_input(bundle_payload(handle, bundle, -1), af, handle.group_count);
  auto fwd_f = net::forward(handle.spec, handle.params, in_f, Mode::kEval);
  const Eigen::Vector2d lf = fwd_f.output.row(0).transpose();

  FairLossComponents c;
  c.factual_ce = net::softmax2_cross_entropy(lf, bundle.y);

  grads = net::NetworkParams::zeros(handle.spec);
  Eigen::Vector2d dlf = net::softmax2_cross_entropy_grad(lf, bundle.y);

  for (std::size_t j = 0; j < bundle.counterfactuals.size(); ++j) {
    const auto& cf = bundle.counterfactuals[j];
    const std::vector<int> ac{cf.a_target};
    const Matrix in_c = predictor_input(
        bundle_payload(handle, bundle, static_cast<int>(j)), ac, handle.group_count);
    auto fwd_c = net::forward(handle.spec, handle.params, in_c, Mode::kEval);
    const Eigen::Vector2d lc = fwd_c.output.row(0).transpose();

    c.cf_ce += net::softmax2_cross_entropy(lc, cf.y_cf);
    c.clp += clp_term(lf, lc, bundle.y, cf.y_cf);

    Eigen::Vector2d dlc =
        lambda_cf * net::softmax2_cross_entropy_grad(lc, cf.y_cf);
    if (bundle.y == cf.y_cf) {
      dlf += lambda_clp * (lf - lc);
      if (cf_gradients) dlc += lambda_clp * (lc - lf);
    }
    const auto back =
        net::backward(handle.spec, handle.params, fwd_c.cache, dlc.transpose());
    net::axpy(grads, back.param_grads, 1.0);
  }

  const auto back_f =
      net::backward(handle.spec, handle.params, fwd_f.cache, dlf.transpose());
  net::axpy(grads, back_f.param_grads, 1.0);
  c.total = c.factual_ce + lambda_cf * c.cf_ce + lambda_clp * c.clp;
  return c;
}

void FairTrainConfig::validate() const {
  if (clp_grid.empty() || cf_grid.empty() || cf_gradients_grid.empty() ||
      learning_rate_grid.empty())
    throw ConfigError("fair training grids must be nonempty");
  for (double l : clp_grid)
    if (!(l >= 0.0)) throw ConfigError("lambda_clp values must be nonnegative");
  for (double l : cf_grid)
    if (!(l >= 0.0)) throw ConfigError("lambda_cf values must be nonnegative");
  for (double l : learning_rate_grid)
    if (!(l > 0.0)) throw ConfigError("learning rates must be positive");
  if (epochs < 0) throw ConfigError("fair epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("fair batch_size must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
}

void BaselineSearchSpace::validate() const {
  if (hidden_dims.empty() || num_hidden_layers.empty() || dropout_probs.empty() ||
      layer_norm.empty() || learning_rates.empty())
    throw ConfigError("baseline search lists must be nonempty");
  if (iterations < 1) throw ConfigError("baseline iterations must be >= 1");
  if (epochs < 0) throw ConfigError("baseline epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("baseline batch_size must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
}

namespace {

// Shared, frozen view of the generative model plus the data both stages need.
struct FairStage {
  FairStage(const cevae::CevaeSpec& spec, const cevae::CevaeParams& params)
      : vae_spec(spec),
        vae_params(params),
        group_count(spec.group_count),
        latent_dim(spec.latent_dim) {}

  const cevae::CevaeSpec& vae_spec;
  const cevae::CevaeParams& vae_params;
  Matrix train_mu, train_sigma;  // n_train x d
  std::vector<int> train_a;
  std::vector<int> train_y;
  // Fixed validation bundles: posterior-mean latents, outcomes drawn once.
  Matrix val_u;
  std::vector<int> val_a;
  std::vector<int> val_y;
  Eigen::MatrixXi val_y_cf;  // n_val x K, factual column mirrors val_y
  int group_count = 0;
  int latent_dim = 0;
};

std::vector<std::size_t> resolve_ids(const data::Dataset& dataset,
                                     std::span<const std::int64_t> ids) {
  const auto index = data::index_by_id(dataset);
  std::vector<std::size_t> pos;
  pos.reserve(ids.size());
  for (auto id : ids) {
    const auto it = index.find(id);
    if (it == index.end())
      throw ConfigError("unknown sample id " + std::to_string(id));
    pos.push_back(it->second);
  }
  return pos;
}

Matrix dense_features(const data::Dataset& dataset,
                      std::span<const std::size_t> positions) {
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(positions.size()),
                          dataset.feature_dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (std::int32_t j : dataset.samples[positions[i]].x) x(i, j) = 1.0;
  return x;
}

FairStage build_stage(const cevae::CevaeSpec& vae_spec,
                      const cevae::CevaeParams& vae_params,
                      const data::Dataset& dataset,
                      std::span<const std::int64_t> train_ids,
                      std::span<const std::int64_t> validation_ids,
                      std::uint64_t seed) {
  FairStage st(vae_spec, vae_params);
  const auto train_pos = resolve_ids(dataset, train_ids);
  const auto val_pos = resolve_ids(dataset, validation_ids);

  st.train_a.reserve(train_pos.size());
  st.train_y.reserve(train_pos.size());
  for (auto p : train_pos) {
    st.train_a.push_back(dataset.samples[p].a);
    st.train_y.push_back(dataset.samples[p].y);
  }
  cevae::encode_batch(vae_spec, vae_params, dense_features(dataset, train_pos),
                      st.train_a, st.train_mu, st.train_sigma);

  st.val_a.reserve(val_pos.size());
  st.val_y.reserve(val_pos.size());
  for (auto p : val_pos) {
    st.val_a.push_back(dataset.samples[p].a);
    st.val_y.push_back(dataset.samples[p].y);
  }
  Matrix val_sigma;
  cevae::encode_batch(vae_spec, vae_params, dense_features(dataset, val_pos),
                      st.val_a, st.val_u, val_sigma);

  const Eigen::Index nv = st.val_u.rows();
  const int K = st.group_count;
  st.val_y_cf.resize(nv, K);
  Matrix probs(nv, K);
  for (int k = 0; k < K; ++k)
    probs.col(k) = cevae::decode_y_batch(vae_spec, vae_params, st.val_u, k);
  Rng rng(derive_seed(seed, "fair-val-bundles"));
  for (Eigen::Index i = 0; i < nv; ++i)
    for (int k = 0; k < K; ++k) {
      if (k == st.val_a[i]) {
        st.val_y_cf(i, k) = st.val_y[i];
      } else {
        st.val_y_cf(i, k) = rng.uniform() < probs(i, k) ? 1 : 0;
      }
    }
  return st;
}

net::NetworkSpec predictor_spec_from(const cevae::CevaeSpec& vae_spec) {
  // The predictor reuses the outcome decoder's architecture over
  // [u | onehot(a)], widened to two logits.
  net::NetworkSpec s = vae_spec.decoder_y;
  s.input_dim = vae_spec.latent_dim + vae_spec.group_count;
  s.output_dim = 2;
  return s;
}

struct EvalStats {
  double mean_factual_ce = 0.0;
  double mean_cf_ce = 0.0;
  double mean_clp = 0.0;
  double total(double lambda_cf, double lambda_clp) const {
    return mean_factual_ce + lambda_cf * mean_cf_ce + lambda_clp * mean_clp;
  }
};

// Eval-mode pass over fixed bundles kept in matrix form.
EvalStats eval_on_bundles(const PredictorHandle& handle, const Matrix& u,
                          std::span<const int> a, std::span<const int> y,
                          const Eigen::MatrixXi& y_cf) {
  EvalStats stats;
  const Eigen::Index n = u.rows();
  if (n == 0) return stats;
  const int K = handle.group_count;

  const Matrix lf =
      net::forward_eval(handle.spec, handle.params, predictor_input(u, a, K));
  std::vector<Matrix> lcf(K);
  for (int k = 0; k < K; ++k) {
    const std::vector<int> ak(n, k);
    lcf[k] =
        net::forward_eval(handle.spec, handle.params, predictor_input(u, ak, K));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector2d li = lf.row(i).transpose();
    stats.mean_factual_ce += net::softmax2_cross_entropy(li, y[i]);
    for (int k = 0; k < K; ++k) {
      if (k == a[i]) continue;
      const Eigen::Vector2d lk = lcf[k].row(i).transpose();
      stats.mean_cf_ce += net::softmax2_cross_entropy(lk, y_cf(i, k));
      stats.mean_clp += clp_term(li, lk, y[i], y_cf(i, k));
    }
  }
  stats.mean_factual_ce /= static_cast<double>(n);
  stats.mean_cf_ce /= static_cast<double>(n);
  stats.mean_clp /= static_cast<double>(n);
  return stats;
}

Candidate train_one_candidate(const FairTrainConfig& config, const FairStage& st,
                              int grid_index, double lambda_clp, double lambda_cf,
                              bool cf_gradients, double learning_rate,
                              std::uint64_t stage_seed) {
  Candidate cand;
  cand.grid_index = grid_index;
  cand.lambda_clp = lambda_clp;
  cand.lambda_cf = lambda_cf;
  cand.cf_gradients = cf_gradients;
  cand.learning_rate = learning_rate;

  const std::uint64_t seed = derive_seed(stage_seed, "fair-candidate", grid_index);
  const int K = st.group_count;
  const int d = st.latent_dim;
  const Eigen::Index n = st.train_mu.rows();

  PredictorHandle h;
  h.spec = predictor_spec_from(st.vae_spec);
  h.input_mode = InputMode::kLatent;
  h.group_count = K;
  h.latent_dim = d;
  Rng init_rng(derive_seed(seed, "init"));
  h.params = net::NetworkParams::init(h.spec, init_rng);

  net::AdamState adam;
  adam.config.learning_rate = learning_rate;

  net::NetworkParams best_params = h.params;
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;

  std::uint64_t global_step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Regenerate training bundles: a reparameterized latent per sample and
    // fresh counterfactual outcomes from the frozen decoder.
    Rng bundle_rng(derive_seed(seed, "train-bundles", epoch));
    Matrix u(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int t = 0; t < d; ++t)
        u(i, t) = st.train_mu(i, t) + st.train_sigma(i, t) * bundle_rng.normal();
    Matrix probs(n, K);
    for (int k = 0; k < K; ++k)
      probs.col(k) = cevae::decode_y_batch(st.vae_spec, st.vae_params, u, k);
    Eigen::MatrixXi y_cf(n, K);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int k = 0; k < K; ++k)
        y_cf(i, k) = k == st.train_a[i]
                         ? st.train_y[i]
                         : (bundle_rng.uniform() < probs(i, k) ? 1 : 0);

    std::vector<Eigen::Index> order(n);
    for (Eigen::Index i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);

    for (std::size_t start = 0; start < order.size();
         start += config.batch_size) {
      const std::size_t len =
          std::min<std::size_t>(config.batch_size, order.size() - start);
      const Eigen::Index b = static_cast<Eigen::Index>(len);

      Matrix bu(b, d);
      std::vector<int> ba(len);
      std::vector<int> by(len);
      Eigen::MatrixXi bcf(b, K);
      for (Eigen::Index i = 0; i < b; ++i) {
        const Eigen::Index row = order[start + i];
        bu.row(i) = u.row(row);
        ba[i] = st.train_a[row];
        by[i] = st.train_y[row];
        bcf.row(i) = y_cf.row(row);
      }

      Rng drop_rng(derive_seed(seed, "dropout", global_step));
      auto fwd_f = net::forward(h.spec, h.params, predictor_input(bu, ba, K),
                                Mode::kTrain, &drop_rng);
      std::vector<net::ForwardResult> fwd_k;
      fwd_k.reserve(K);
      for (int k = 0; k < K; ++k) {
        const std::vector<int> ak(len, k);
        fwd_k.push_back(net::forward(h.spec, h.params,
                                     predictor_input(bu, ak, K), Mode::kTrain,
                                     &drop_rng));
      }

      const double inv_b = 1.0 / static_cast<double>(b);
      Matrix gf(b, 2);
      std::vector<Matrix> gk(K, Matrix::Zero(b, 2));
      double batch_loss = 0.0;
      for (Eigen::Index i = 0; i < b; ++i) {
        const Eigen::Vector2d lf = fwd_f.output.row(i).transpose();
        batch_loss += net::softmax2_cross_entropy(lf, by[i]);
        Eigen::Vector2d dlf = net::softmax2_cross_entropy_grad(lf, by[i]);
        for (int k = 0; k < K; ++k) {
          if (k == ba[i]) continue;
          const Eigen::Vector2d lc = fwd_k[k].output.row(i).transpose();
          batch_loss += lambda_cf * net::softmax2_cross_entropy(lc, bcf(i, k));
          batch_loss += lambda_clp * clp_term(lf, lc, by[i], bcf(i, k));
          Eigen::Vector2d dlc =
              lambda_cf * net::softmax2_cross_entropy_grad(lc, bcf(i, k));
          if (by[i] == bcf(i, k)) {
            dlf += lambda_clp * (lf - lc);
            if (cf_gradients) dlc += lambda_clp * (lc - lf);
          }
          gk[k].row(i) = (inv_b * dlc).transpose();
        }
        gf.row(i) = (inv_b * dlf).transpose();
      }
      batch_loss *= inv_b;
      if (!std::isfinite(batch_loss))
        throw DivergenceError("fair training diverged at grid point " +
                              std::to_string(grid_index) + ", epoch " +
                              std::to_string(epoch));

      auto back = net::backward(h.spec, h.params, fwd_f.cache, gf);
      net::NetworkParams grads = std::move(back.param_grads);
      for (int k = 0; k < K; ++k) {
        const auto bk = net::backward(h.spec, h.params, fwd_k[k].cache, gk[k]);
        net::axpy(grads, bk.param_grads, 1.0);
      }
      net::adam_step(adam, net::param_blocks(h.params), net::param_blocks(grads));
      ++global_step;
    }

    const EvalStats val =
        eval_on_bundles(h, st.val_u, st.val_a, st.val_y, st.val_y_cf);
    const double val_total = val.total(lambda_cf, lambda_clp);
    if (!std::isfinite(val_total))
      throw DivergenceError("fair validation diverged at grid point " +
                            std::to_string(grid_index));
    if (val_total < best_val) {
      best_val = val_total;
      best_params = h.params;
      stale = 0;
    } else if (++stale >= config.early_stop_patience) {
      break;
    }
  }

  h.params = std::move(best_params);
  const EvalStats final_val =
      eval_on_bundles(h, st.val_u, st.val_a, st.val_y, st.val_y_cf);
  cand.handle = std::move(h);
  cand.val_clp = final_val.mean_clp;
  cand.val_ce = final_val.mean_factual_ce;
  return cand;
}

}  // namespace

std::vector<Candidate> train_fair_predictors(
    const FairTrainConfig& config, const cevae::CevaeSpec& vae_spec,
    const cevae::CevaeParams& vae_params, const data::Dataset& dataset,
    std::span<const std::int64_t> train_ids,
    std::span<const std::int64_t> validation_ids, std::uint64_t seed,
    int threads) {
  config.validate();
  vae_spec.validate();
  if (train_ids.empty())
    throw ConfigError("train_fair_predictors requires training samples");
  if (validation_ids.empty())
    throw ConfigError("train_fair_predictors requires validation samples");

  const FairStage stage =
      build_stage(vae_spec, vae_params, dataset, train_ids, validation_ids, seed);

  struct GridPoint {
    double clp, cf, lr;
    bool cfg;
  };
  std::vector<GridPoint> points;
  for (double clp : config.clp_grid)
    for (double cf : config.cf_grid)
      for (bool cfg : config.cf_gradients_grid)
        for (double lr : config.learning_rate_grid)
          points.push_back({clp, cf, lr, cfg});

  std::vector<Candidate> out(points.size());
  auto run_point = [&](std::size_t i) {
    try {
      out[i] = train_one_candidate(config, stage, static_cast<int>(i),
                                   points[i].clp, points[i].cf, points[i].cfg,
                                   points[i].lr, seed);
    } catch (const DivergenceError& e) {
      Candidate c;
      c.grid_index = static_cast<int>(i);
      c.lambda_clp = points[i].clp;
      c.lambda_cf = points[i].cf;
      c.cf_gradients = points[i].cfg;
      c.learning_rate = points[i].lr;
      c.failed = true;
      c.failure = e.what();
      out[i] = std::move(c);
    }
  };

  const int workers = std::max(1, threads);
  if (workers == 1 || points.size() <= 1) {
    for (std::size_t i = 0; i < points.size(); ++i) run_point(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int count = std::min<std::size_t>(workers, points.size());
    pool.reserve(count);
    for (int w = 0; w < count; ++w)
      pool.emplace_back([&]() {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= points.size()) return;
          run_point(i);
        }
      });
    for (auto& t : pool) t.join();
  }
  return out;
}

std::vector<Candidate> select_models(const std::vector<Candidate>& candidates) {
  if (candidates.empty()) throw ConfigError("select_models needs candidates");
  std::vector<double> lambda_order;
  for (const auto& c : candidates)
    if (std::find(lambda_order.begin(), lambda_order.end(), c.lambda_clp) ==
        lambda_order.end())
      lambda_order.push_back(c.lambda_clp);

  std::vector<Candidate> selected;
  for (double lambda : lambda_order) {
    const Candidate* best = nullptr;
    for (const auto& c : candidates) {
      if (c.lambda_clp != lambda || c.failed) continue;
      if (best == nullptr || c.val_clp < best->val_clp ||
          (c.val_clp == best->val_clp && c.grid_index < best->grid_index))
        best = &c;
    }
    if (best == nullptr)
      throw ConfigError("all candidates failed for lambda_clp=" +
                        std::to_string(lambda));
    selected.push_back(*best);
  }
  return selected;
}

BaselineResult train_baseline(const BaselineSearchSpace& search,
                              const data::Dataset& dataset,
                              std::span<const std::int64_t> train_ids,
                              std::span<const std::int64_t> validation_ids,
                              std::uint64_t seed) {
  search.validate();
  if (train_ids.empty()) throw ConfigError("train_baseline requires training samples");
  if (validation_ids.empty())
    throw ConfigError("train_baseline requires validation samples");

  const auto train_pos = resolve_ids(dataset, train_ids);
  const auto val_pos = resolve_ids(dataset, validation_ids);
  const int K = dataset.group_count;
  const int m = dataset.feature_dim;

  const Matrix x_train = dense_features(dataset, train_pos);
  const Matrix x_val = dense_features(dataset, val_pos);
  std::vector<int> a_train, y_train, a_val, y_val;
  for (auto p : train_pos) {
    a_train.push_back(dataset.samples[p].a);
    y_train.push_back(dataset.samples[p].y);
  }
  for (auto p : val_pos) {
    a_val.push_back(dataset.samples[p].a);
    y_val.push_back(dataset.samples[p].y);
  }
  const Matrix in_val = predictor_input(x_val, a_val, K);

  struct Draw {
    int hidden, layers;
    double dropout, lr;
    bool ln;
    bool operator==(const Draw& o) const {
      return hidden == o.hidden && layers == o.layers && dropout == o.dropout &&
             lr == o.lr && ln == o.ln;
    }
  };
  std::vector<Draw> draws;
  Rng search_rng(derive_seed(seed, "baseline-search"));
  for (int it = 0; it < search.iterations; ++it) {
    Draw d;
    d.hidden = search.hidden_dims[search_rng.below(search.hidden_dims.size())];
    d.layers =
        search.num_hidden_layers[search_rng.below(search.num_hidden_layers.size())];
    d.dropout = search.dropout_probs[search_rng.below(search.dropout_probs.size())];
    d.ln = search.layer_norm[search_rng.below(search.layer_norm.size())];
    d.lr = search.learning_rates[search_rng.below(search.learning_rates.size())];
    if (std::find(draws.begin(), draws.end(), d) == draws.end())
      draws.push_back(d);
  }

  BaselineResult best;
  double best_ce = std::numeric_limits<double>::infinity();
  bool any = false;

  for (std::size_t di = 0; di < draws.size(); ++di) {
    const auto& d = draws[di];
    PredictorHandle h;
    h.spec.input_dim = m + K;
    h.spec.hidden_dim = d.hidden;
    h.spec.num_hidden_layers = d.layers;
    h.spec.output_dim = 2;
    h.spec.dropout_prob = d.dropout;
    h.spec.layer_norm = d.ln;
    h.input_mode = InputMode::kFeatures;
    h.group_count = K;
    h.feature_dim = m;

    const std::uint64_t cand_seed = derive_seed(seed, "baseline-cand", di);
    Rng init_rng(derive_seed(cand_seed, "init"));
    h.params = net::NetworkParams::init(h.spec, init_rng);

    net::AdamState adam;
    adam.config.learning_rate = d.lr;

    auto val_ce_of = [&](const PredictorHandle& handle) {
      const Matrix logits = net::forward_eval(handle.spec, handle.params, in_val);
      double ce = 0.0;
      for (Eigen::Index i = 0; i < logits.rows(); ++i)
        ce += net::softmax2_cross_entropy(logits.row(i).transpose(), y_val[i]);
      return ce / std::max<double>(1.0, double(logits.rows()));
    };

    net::NetworkParams best_params = h.params;
    double cand_best = std::numeric_limits<double>::infinity();
    int stale = 0;
    bool diverged = false;
    std::uint64_t global_step = 0;

    for (int epoch = 0; epoch < search.epochs && !diverged; ++epoch) {
      std::vector<Eigen::Index> order(train_pos.size());
      for (std::size_t i = 0; i < train_pos.size(); ++i) order[i] = i;
      Rng shuffle_rng(derive_seed(cand_seed, "shuffle", epoch));
      shuffle_rng.shuffle(order);

      for (std::size_t start = 0; start < order.size();
           start += search.batch_size) {
        const std::size_t len =
            std::min<std::size_t>(search.batch_size, order.size() - start);
        Matrix bx(len, m);
        std::vector<int> ba(len);
        std::vector<int> by(len);
        for (std::size_t i = 0; i < len; ++i) {
          bx.row(i) = x_train.row(order[start + i]);
          ba[i] = a_train[order[start + i]];
          by[i] = y_train[order[start + i]];
        }
        Rng drop_rng(derive_seed(cand_seed, "dropout", global_step));
        auto fwd = net::forward(h.spec, h.params, predictor_input(bx, ba, K),
                                Mode::kTrain, &drop_rng);
        Matrix g(len, 2);
        double loss = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          const Eigen::Vector2d li = fwd.output.row(i).transpose();
          loss += net::softmax2_cross_entropy(li, by[i]);
          g.row(i) =
              (net::softmax2_cross_entropy_grad(li, by[i]) / double(len)).transpose();
        }
        if (!std::isfinite(loss)) {
          diverged = true;
          break;
        }
        auto back = net::backward(h.spec, h.params, fwd.cache, g);
        net::adam_step(adam, net::param_blocks(h.params),
                       net::param_blocks(back.param_grads));
        ++global_step;
      }
      if (diverged) break;

      const double ce = val_ce_of(h);
      if (!std::isfinite(ce)) {
        diverged = true;
        break;
      }
      if (ce < cand_best) {
        cand_best = ce;
        best_params = h.params;
        stale = 0;
      } else if (++stale >= search.early_stop_patience) {
        break;
      }
    }
    if (diverged) continue;

    h.params = std::move(best_params);
    const double ce = val_ce_of(h);
    if (!any || ce < best_ce) {
      any = true;
      best_ce = ce;
      best.handle = std::move(h);
      best.val_ce = ce;
      best.learning_rate = d.lr;
    }
  }
  if (!any) throw ConfigError("every baseline search candidate diverged");
  return best;
}

}  // namespace cfodds::fair
