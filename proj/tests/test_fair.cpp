#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cfodds/fair.hpp"
#include "cfodds/sem.hpp"
#include "fd_check.hpp"

using namespace cfodds;
using namespace cfodds::fair;
using cevae::CounterfactualBundle;
using cevae::CounterfactualSample;
using net::Matrix;
using net::Vector;

namespace {

// Generic-point predictor: biases nudged off zero so no ReLU sits on its kink
// during finite-difference probes.
PredictorHandle tiny_handle(int latent_dim, int group_count, bool layer_norm,
                            std::uint64_t seed) {
  PredictorHandle h;
  h.spec.input_dim = latent_dim + group_count;
  h.spec.hidden_dim = 6;
  h.spec.num_hidden_layers = 1;
  h.spec.output_dim = 2;
  h.spec.layer_norm = layer_norm;
  h.input_mode = InputMode::kLatent;
  h.group_count = group_count;
  h.latent_dim = latent_dim;
  Rng rng(seed);
  h.params = net::NetworkParams::init(h.spec, rng);
  for (auto& block : net::param_blocks(h.params))
    for (std::size_t i = 0; i < block.size; ++i)
      block.data[i] += 0.05 * rng.normal();
  return h;
}

// One matching-outcome and one flipped-outcome counterfactual, so a single
// bundle exercises both gate states of the pairing term.
CounterfactualBundle tiny_bundle(int latent_dim, std::uint64_t seed) {
  CounterfactualBundle b;
  b.sample_id = 7;
  b.a = 1;
  b.y = 1;
  Rng rng(seed);
  b.u.resize(latent_dim);
  for (int i = 0; i < latent_dim; ++i) b.u(i) = rng.normal();
  CounterfactualSample c0;
  c0.a_target = 0;
  c0.y_cf = 1;
  CounterfactualSample c2;
  c2.a_target = 2;
  c2.y_cf = 0;
  b.counterfactuals = {c0, c2};
  return b;
}

data::SemDataset tiny_sem(std::int64_t n) {
  auto config = data::SemConfig::from_scales(
      /*latent_dim=*/2, /*feature_dim=*/6, /*group_count=*/2,
      /*group_marginals=*/{0.5, 0.5},
      /*u_x_scale=*/1.0, /*a_x_scale=*/0.5, /*x_bias=*/-0.5,
      /*u_y_scale=*/1.5, /*a_y_effects=*/{0.0, 1.0}, /*y_bias=*/0.0,
      /*weight_seed=*/11, /*seed=*/12);
  return data::generate_sem_dataset(config, n);
}

bool params_equal(const net::NetworkParams& a, const net::NetworkParams& b) {
  auto ab = net::param_blocks(const_cast<net::NetworkParams&>(a));
  auto bb = net::param_blocks(const_cast<net::NetworkParams&>(b));
  if (ab.size() != bb.size()) return false;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    if (ab[i].size != bb[i].size) return false;
    for (std::size_t j = 0; j < ab[i].size; ++j)
      if (ab[i].data[j] != bb[i].data[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("positive probability is the softmax mass of logit one") {
  CHECK(positive_probability(Eigen::Vector2d(0.0, 0.0)) == doctest::Approx(0.5));
  const double expect = 1.0 / (1.0 + std::exp(2.0));
  CHECK(positive_probability(Eigen::Vector2d(1.0, -1.0)) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pairing term hand values") {
  const Eigen::Vector2d a(1.0, 0.0);
  const Eigen::Vector2d b(0.0, 1.0);
  SUBCASE("matching outcomes average the squared logit gaps") {
    CHECK(clp_term(a, b, 1, 1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(clp_term(a, a, 0, 0) == 0.0);
    CHECK(clp_term(Eigen::Vector2d(2.0, -1.0), Eigen::Vector2d(0.0, 0.0), 1, 1) ==
          doctest::Approx(2.5).epsilon(1e-15));
  }
  SUBCASE("outcome disagreement gates the term to zero") {
    CHECK(clp_term(a, b, 1, 0) == 0.0);
    CHECK(clp_term(a, b, 0, 1) == 0.0);
  }
}

TEST_CASE("predictor handle validation") {
  auto h = tiny_handle(3, 3, false, 5);
  CHECK_NOTHROW(h.validate());
  SUBCASE("two logits required") {
    h.spec.output_dim = 1;
    CHECK_THROWS_AS(h.validate(), ShapeError);
  }
  SUBCASE("input width must match mode") {
    h.spec.input_dim = 3;
    CHECK_THROWS_AS(h.validate(), ShapeError);
  }
  SUBCASE("feature mode needs feature_dim") {
    h.input_mode = InputMode::kFeatures;
    CHECK_THROWS_AS(h.validate(), ConfigError);
  }
}

TEST_CASE("fair loss assembles its components linearly in the weights") {
  auto h = tiny_handle(3, 3, false, 21);
  const auto bundle = tiny_bundle(3, 22);

  const auto base = fair_loss(h, bundle, 0.0, 0.0, true);
  CHECK(base.total == base.factual_ce);
  CHECK(base.factual_ce > 0.0);
  CHECK(base.cf_ce > 0.0);
  CHECK(base.clp > 0.0);

  const double lcf = 0.7, lclp = 3.1;
  const auto weighted = fair_loss(h, bundle, lcf, lclp, true);
  CHECK(weighted.factual_ce == base.factual_ce);
  CHECK(weighted.cf_ce == base.cf_ce);
  CHECK(weighted.clp == base.clp);
  CHECK(weighted.total ==
        doctest::Approx(base.factual_ce + lcf * base.cf_ce + lclp * base.clp)
            .epsilon(1e-15));

  // The gradient gate does not change values.
  const auto frozen = fair_loss(h, bundle, lcf, lclp, false);
  CHECK(frozen.total == weighted.total);
  CHECK(frozen.clp == weighted.clp);
}

TEST_CASE("bundle scoring matches the loss path and guards feature mode") {
  auto h = tiny_handle(3, 3, false, 31);
  const auto bundle = tiny_bundle(3, 32);
  const auto s = score_bundle(h, bundle);
  REQUIRE(s.cf_logits.size() == 2);
  const auto c = fair_loss(h, bundle, 1.0, 1.0, true);
  const double clp_direct =
      clp_term(s.factual_logits, s.cf_logits[0], bundle.y,
               bundle.counterfactuals[0].y_cf) +
      clp_term(s.factual_logits, s.cf_logits[1], bundle.y,
               bundle.counterfactuals[1].y_cf);
  CHECK(c.clp == doctest::Approx(clp_direct).epsilon(1e-15));
  CHECK(s.p_factual == doctest::Approx(positive_probability(s.factual_logits)));

  SUBCASE("feature-mode scoring insists on materialized counterfactual features") {
    PredictorHandle fh;
    fh.spec.input_dim = 6 + 3;
    fh.spec.hidden_dim = 4;
    fh.spec.num_hidden_layers = 1;
    fh.spec.output_dim = 2;
    fh.input_mode = InputMode::kFeatures;
    fh.group_count = 3;
    fh.feature_dim = 6;
    Rng rng(33);
    fh.params = net::NetworkParams::init(fh.spec, rng);

    CounterfactualBundle fb = bundle;
    fb.u.resize(0);
    fb.x = {1, 4};
    fb.has_features = false;
    CHECK_THROWS_AS(score_bundle(fh, fb), ConfigError);

    fb.has_features = true;
    fb.counterfactuals[0].x_cf = {0, 2};
    fb.counterfactuals[1].x_cf = {4};
    CHECK_NOTHROW(score_bundle(fh, fb));
  }
}

TEST_CASE("fair loss gradients pass a finite-difference audit") {
  for (bool layer_norm : {false, true}) {
    CAPTURE(layer_norm);
    auto h = tiny_handle(3, 3, layer_norm, 41);
    const auto bundle = tiny_bundle(3, 42);
    const double lcf = 0.8, lclp = 2.5;

    SUBCASE("counterfactual gradients enabled") {
      net::NetworkParams grads;
      fair_loss_with_grads(h, bundle, lcf, lclp, true, grads);
      auto report = testing::fd_check(
          net::param_blocks(h.params), net::param_blocks(grads),
          [&]() { return fair_loss(h, bundle, lcf, lclp, true).total; });
      CAPTURE(report.worst_block);
      CAPTURE(report.analytic);
      CAPTURE(report.numeric);
      CHECK(report.max_rel_error < 1e-6);
    }

    SUBCASE("counterfactual gradients frozen") {
      // With the gate off, the analytic gradient equals the gradient of a
      // surrogate whose pairing term holds the counterfactual logits at
      // their base-point values.
      net::NetworkParams grads;
      fair_loss_with_grads(h, bundle, lcf, lclp, false, grads);
      const auto frozen = score_bundle(h, bundle).cf_logits;
      auto surrogate = [&]() {
        const auto s = score_bundle(h, bundle);
        double loss = net::softmax2_cross_entropy(s.factual_logits, bundle.y);
        for (std::size_t j = 0; j < bundle.counterfactuals.size(); ++j) {
          const auto& cf = bundle.counterfactuals[j];
          loss += lcf * net::softmax2_cross_entropy(s.cf_logits[j], cf.y_cf);
          loss += lclp * clp_term(s.factual_logits, frozen[j], bundle.y, cf.y_cf);
        }
        return loss;
      };
      auto report = testing::fd_check(net::param_blocks(h.params),
                                      net::param_blocks(grads), surrogate);
      CAPTURE(report.worst_block);
      CHECK(report.max_rel_error < 1e-6);
    }
  }
}

TEST_CASE("a bundle without counterfactuals reduces to factual cross entropy") {
  auto h = tiny_handle(2, 1, false, 51);
  CounterfactualBundle b;
  b.a = 0;
  b.y = 1;
  b.u.resize(2);
  b.u << 0.3, -1.1;

  const auto c = fair_loss(h, b, 5.0, 7.0, true);
  CHECK(c.cf_ce == 0.0);
  CHECK(c.clp == 0.0);
  CHECK(c.total == c.factual_ce);

  net::NetworkParams grads;
  fair_loss_with_grads(h, b, 5.0, 7.0, true, grads);
  auto report = testing::fd_check(
      net::param_blocks(h.params), net::param_blocks(grads),
      [&]() { return fair_loss(h, b, 5.0, 7.0, true).total; });
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("candidate selection keeps one winner per pairing weight") {
  auto mk = [](int idx, double lclp, double val_clp, bool failed = false) {
    Candidate c;
    c.grid_index = idx;
    c.lambda_clp = lclp;
    c.val_clp = val_clp;
    c.val_ce = 0.5;
    c.failed = failed;
    return c;
  };

  SUBCASE("minimal validation pairing wins, ties to the earliest") {
    std::vector<Candidate> cands{mk(0, 0.0, 0.5), mk(1, 0.0, 0.3),
                                 mk(2, 1.0, 0.3), mk(3, 1.0, 0.3)};
    const auto sel = select_models(cands);
    REQUIRE(sel.size() == 2);
    CHECK(sel[0].grid_index == 1);
    CHECK(sel[1].grid_index == 2);

    const auto again = select_models(sel);
    REQUIRE(again.size() == 2);
    CHECK(again[0].grid_index == sel[0].grid_index);
    CHECK(again[1].grid_index == sel[1].grid_index);
  }

  SUBCASE("failed candidates are skipped") {
    std::vector<Candidate> cands{mk(0, 0.0, 0.1, true), mk(1, 0.0, 0.9)};
    const auto sel = select_models(cands);
    REQUIRE(sel.size() == 1);
    CHECK(sel[0].grid_index == 1);
  }

  SUBCASE("a weight whose candidates all failed is an error") {
    std::vector<Candidate> cands{mk(0, 0.0, 0.1), mk(1, 2.0, 0.2, true)};
    CHECK_THROWS_AS(select_models(cands), ConfigError);
  }

  SUBCASE("no candidates at all is an error") {
    CHECK_THROWS_AS(select_models({}), ConfigError);
  }
}

TEST_CASE("fair training sweeps the grid deterministically") {
  const auto sem = tiny_sem(240);
  const auto split = data::split_dataset(sem.dataset.samples, {0.7, 0.15, 0.15}, 3);

  auto spec = cevae::CevaeSpec::make(/*feature_dim=*/6, /*group_count=*/2,
                                     /*latent_dim=*/2, /*group_embedding_dim=*/2,
                                     /*hidden_dim=*/6, /*num_hidden_layers=*/1,
                                     /*dropout_prob=*/0.0, /*layer_norm=*/false);
  Rng vrng(61);
  const auto vae = cevae::CevaeParams::init(spec, vrng);

  FairTrainConfig config;
  config.clp_grid = {0.0, 0.5};
  config.cf_grid = {1.0};
  config.cf_gradients_grid = {true};
  config.learning_rate_grid = {0.01};
  config.epochs = 2;
  config.batch_size = 64;

  const auto a = train_fair_predictors(config, spec, vae, sem.dataset,
                                       split.train, split.validation, 71);
  REQUIRE(a.size() == 2);
  CHECK(a[0].grid_index == 0);
  CHECK(a[0].lambda_clp == 0.0);
  CHECK(a[1].lambda_clp == 0.5);
  for (const auto& c : a) {
    CHECK(!c.failed);
    CHECK(std::isfinite(c.val_ce));
    CHECK(std::isfinite(c.val_clp));
    CHECK(c.val_clp >= 0.0);
  }

  SUBCASE("a rerun is bitwise identical") {
    const auto b = train_fair_predictors(config, spec, vae, sem.dataset,
                                         split.train, split.validation, 71);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].val_clp == b[i].val_clp);
      CHECK(a[i].val_ce == b[i].val_ce);
      CHECK(params_equal(a[i].handle.params, b[i].handle.params));
    }
  }

  SUBCASE("results do not depend on the worker count") {
    const auto b = train_fair_predictors(config, spec, vae, sem.dataset,
                                         split.train, split.validation, 71,
                                         /*threads=*/2);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].val_clp == b[i].val_clp);
      CHECK(params_equal(a[i].handle.params, b[i].handle.params));
    }
  }

  SUBCASE("zero epochs returns evaluated initializations") {
    FairTrainConfig zero = config;
    zero.epochs = 0;
    const auto b = train_fair_predictors(zero, spec, vae, sem.dataset,
                                         split.train, split.validation, 71);
    REQUIRE(b.size() == 2);
    for (const auto& c : b) {
      CHECK(!c.failed);
      CHECK(std::isfinite(c.val_ce));
      CHECK(c.val_ce > 0.0);
    }
  }

  SUBCASE("empty grids are rejected") {
    FairTrainConfig bad = config;
    bad.clp_grid.clear();
    CHECK_THROWS_AS(train_fair_predictors(bad, spec, vae, sem.dataset,
                                          split.train, split.validation, 71),
                    ConfigError);
  }
}

TEST_CASE("baseline search honors a single-point space") {
  const auto sem = tiny_sem(200);
  const auto split = data::split_dataset(sem.dataset.samples, {0.7, 0.15, 0.15}, 9);

  BaselineSearchSpace space;
  space.hidden_dims = {5};
  space.num_hidden_layers = {1};
  space.dropout_probs = {0.0};
  space.layer_norm = {false};
  space.learning_rates = {0.01};
  space.iterations = 3;
  space.epochs = 3;
  space.batch_size = 64;

  const auto result =
      train_baseline(space, sem.dataset, split.train, split.validation, 91);
  CHECK(result.handle.input_mode == InputMode::kFeatures);
  CHECK(result.handle.spec.hidden_dim == 5);
  CHECK(result.handle.spec.num_hidden_layers == 1);
  CHECK(result.handle.spec.input_dim == 6 + 2);
  CHECK(result.handle.spec.output_dim == 2);
  CHECK(result.learning_rate == 0.01);
  CHECK(std::isfinite(result.val_ce));
  CHECK(result.val_ce > 0.0);

  const auto again =
      train_baseline(space, sem.dataset, split.train, split.validation, 91);
  CHECK(again.val_ce == result.val_ce);
  CHECK(params_equal(again.handle.params, result.handle.params));
}
