#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "cfodds/metrics.hpp"
#include "cfodds/rng.hpp"

using namespace cfodds;
using namespace cfodds::metrics;
using cevae::CounterfactualBundle;
using cevae::CounterfactualSample;
using fair::BundleScores;

namespace {

// O(n^2) pair counting: wins + half-ties over all positive-negative pairs.
double auc_roc_oracle(std::span<const double> s, std::span<const int> y) {
  double acc = 0.0;
  long np = 0, nn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    ++np;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      if (s[i] > s[j])
        acc += 1.0;
      else if (s[i] == s[j])
        acc += 0.5;
    }
  }
  for (int v : y) nn += (v == 0);
  return acc / (static_cast<double>(np) * static_cast<double>(nn));
}

// Every distinct score is a cut; tp/fp recounted from scratch per cut.
double auc_prc_oracle(std::span<const double> s, std::span<const int> y) {
  std::set<double, std::greater<double>> cuts(s.begin(), s.end());
  long positives = 0;
  for (int v : y) positives += v;
  double ap = 0.0;
  double prev_recall = 0.0;
  for (double t : cuts) {
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] < t) continue;
      if (y[i] == 1)
        ++tp;
      else
        ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision =
        static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

struct RandomCase {
  std::vector<double> scores;
  std::vector<int> labels;
};

RandomCase random_case(Rng& rng, int n, bool with_ties) {
  RandomCase c;
  c.scores.resize(n);
  c.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    // Coarse grid forces ties; fine values make them rare.
    c.scores[i] = with_ties ? std::floor(rng.uniform() * 8.0) / 8.0 : rng.uniform();
    c.labels[i] = rng.bernoulli(0.4) ? 1 : 0;
  }
  return c;
}

bool both_classes(const std::vector<int>& y) {
  bool p = false, n = false;
  for (int v : y) (v == 1 ? p : n) = true;
  return p && n;
}

// A bundle/score pair built by hand; the predictor never runs.
struct Fabricated {
  std::vector<CounterfactualBundle> bundles;
  std::vector<BundleScores> scores;
};

void push_sample(Fabricated& f, int a, int y, double p_f,
                 const std::vector<std::pair<int, int>>& cf_ay,
                 const std::vector<double>& cf_p) {
  CounterfactualBundle b;
  b.a = a;
  b.y = y;
  BundleScores s;
  const double logit = std::log(p_f / (1.0 - p_f));
  s.factual_logits = Eigen::Vector2d(0.0, logit);
  s.p_factual = p_f;
  for (std::size_t j = 0; j < cf_ay.size(); ++j) {
    CounterfactualSample c;
    c.a_target = cf_ay[j].first;
    c.y_cf = cf_ay[j].second;
    b.counterfactuals.push_back(c);
    const double lq = std::log(cf_p[j] / (1.0 - cf_p[j]));
    s.cf_logits.push_back(Eigen::Vector2d(0.0, lq));
    s.p_cf.push_back(cf_p[j]);
  }
  f.bundles.push_back(std::move(b));
  f.scores.push_back(std::move(s));
}

}  // namespace

TEST_CASE("auc_roc endpoints and error cases") {
  const std::vector<double> sep{0.9, 0.8, 0.2, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  CHECK(auc_roc(sep, y) == 1.0);
  const std::vector<int> rev{0, 0, 1, 1};
  CHECK(auc_roc(sep, rev) == 0.0);
  const std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
  CHECK(auc_roc(flat, y) == 0.5);
  const std::vector<int> ones{1, 1, 1, 1};
  CHECK_THROWS_AS(auc_roc(sep, ones), UndefinedMetricError);
}

TEST_CASE("auc_roc equals the pair-counting oracle exactly") {
  Rng rng(101);
  int done = 0;
  while (done < 50) {
    const auto c = random_case(rng, 30, done % 2 == 0);
    if (!both_classes(c.labels)) continue;
    ++done;
    CHECK(auc_roc(c.scores, c.labels) == auc_roc_oracle(c.scores, c.labels));
  }
}

TEST_CASE("auc_roc is invariant under strictly increasing transforms") {
  Rng rng(102);
  for (int trial = 0; trial < 10; ++trial) {
    auto c = random_case(rng, 40, trial % 2 == 0);
    if (!both_classes(c.labels)) continue;
    const double before = auc_roc(c.scores, c.labels);
    for (auto& s : c.scores) s = s * s * s + s;
    CHECK(std::abs(auc_roc(c.scores, c.labels) - before) < 1e-12);
  }
}

TEST_CASE("auc_prc endpoints, baseline, and oracle agreement") {
  const std::vector<double> sep{0.9, 0.8, 0.2, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  CHECK(auc_prc(sep, y) == 1.0);

  // A constant classifier scores the prevalence.
  const std::vector<double> flat{0.3, 0.3, 0.3, 0.3, 0.3};
  const std::vector<int> y2{1, 0, 0, 0, 1};
  CHECK(auc_prc(flat, y2) == doctest::Approx(0.4).epsilon(1e-15));

  const std::vector<int> zeros{0, 0, 0, 0};
  CHECK_THROWS_AS(auc_prc(sep, zeros), UndefinedMetricError);

  Rng rng(103);
  int done = 0;
  while (done < 50) {
    const auto c = random_case(rng, 30, done % 2 == 0);
    bool any_pos = false;
    for (int v : c.labels) any_pos |= (v == 1);
    if (!any_pos) continue;
    ++done;
    CHECK(std::abs(auc_prc(c.scores, c.labels) -
                   auc_prc_oracle(c.scores, c.labels)) < 1e-12);
  }
}

TEST_CASE("brier values and decomposition") {
  const std::vector<double> perfect{1.0, 0.0, 1.0};
  const std::vector<int> y{1, 0, 1};
  CHECK(brier(perfect, y) == 0.0);
  const std::vector<double> half{0.5, 0.5, 0.5};
  CHECK(brier(half, y) == 0.25);
  const std::vector<double> hand{0.8, 0.3};
  const std::vector<int> hy{1, 0};
  CHECK(brier(hand, hy) == doctest::Approx(0.065).epsilon(1e-15));

  SUBCASE("concatenation equals the weighted mean of parts") {
    Rng rng(104);
    std::vector<double> p1, p2;
    std::vector<int> l1, l2;
    for (int i = 0; i < 13; ++i) {
      p1.push_back(rng.uniform());
      l1.push_back(rng.bernoulli(0.5));
    }
    for (int i = 0; i < 29; ++i) {
      p2.push_back(rng.uniform());
      l2.push_back(rng.bernoulli(0.5));
    }
    std::vector<double> pc = p1;
    pc.insert(pc.end(), p2.begin(), p2.end());
    std::vector<int> lc = l1;
    lc.insert(lc.end(), l2.begin(), l2.end());
    const double combined = brier(pc, lc);
    const double weighted =
        (13.0 * brier(p1, l1) + 29.0 * brier(p2, l2)) / 42.0;
    CHECK(std::abs(combined - weighted) < 1e-12);
  }

  SUBCASE("probabilities outside the unit interval are rejected") {
    const std::vector<double> bad{1.2, 0.3};
    CHECK_THROWS_AS(brier(bad, hy), ConfigError);
  }
}

TEST_CASE("threshold rule is monotone in the threshold") {
  Rng rng(105);
  std::vector<double> p(60);
  for (auto& v : p) v = rng.uniform();
  long prev = static_cast<long>(p.size()) + 1;
  for (double t : {0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95}) {
    const auto yhat = predict_at(p, t);
    long count = 0;
    for (int v : yhat) count += v;
    CHECK(count <= prev);
    prev = count;
  }
}

TEST_CASE("equalized odds rates and gaps") {
  SUBCASE("perfect probabilities have zero gaps at any threshold") {
    const std::vector<int> y{0, 1, 1, 0, 1, 0};
    const std::vector<double> p{0.0, 1.0, 1.0, 0.0, 1.0, 0.0};
    const std::vector<int> g{0, 0, 0, 1, 1, 1};
    for (double t : {0.1, 0.5, 0.9}) {
      const auto r = equalized_odds_gaps(p, y, g, 2, t);
      REQUIRE(r.gaps.size() == 1);
      CHECK(*r.gaps[0].fpr_gap == 0.0);
      CHECK(*r.gaps[0].fnr_gap == 0.0);
    }
  }

  SUBCASE("constant predictor has zero gaps") {
    const std::vector<int> y{0, 1, 0, 1};
    const std::vector<double> p{0.8, 0.8, 0.8, 0.8};
    const std::vector<int> g{0, 0, 1, 1};
    const auto r = equalized_odds_gaps(p, y, g, 2, 0.5);
    CHECK(*r.gaps[0].fpr_gap == 0.0);
    CHECK(*r.gaps[0].fnr_gap == 0.0);
    CHECK(*r.rates[0].fpr == 1.0);
    CHECK(*r.rates[0].fnr == 0.0);
  }

  SUBCASE("hand-enumerated confusion rates") {
    // group 0: one FP, one FN; group 1: one FP, one TN, one TP.
    const std::vector<double> p{0.9, 0.2, 0.6, 0.1, 0.7};
    const std::vector<int> y{0, 1, 0, 0, 1};
    const std::vector<int> g{0, 0, 1, 1, 1};
    const auto r = equalized_odds_gaps(p, y, g, 2, 0.5);
    CHECK(*r.rates[0].fpr == 1.0);
    CHECK(*r.rates[0].fnr == 1.0);
    CHECK(*r.rates[1].fpr == 0.5);
    CHECK(*r.rates[1].fnr == 0.0);
    CHECK(*r.gaps[0].fpr_gap == 0.5);
    CHECK(*r.gaps[0].fnr_gap == 1.0);
    CHECK(r.rates[0].count == 2);
    CHECK(r.rates[1].count == 3);
  }

  SUBCASE("rates without supporting samples stay undefined") {
    // group 1 has no positives, so its FNR and the pairwise FNR gap vanish.
    const std::vector<double> p{0.9, 0.2, 0.4};
    const std::vector<int> y{1, 0, 0};
    const std::vector<int> g{0, 1, 1};
    const auto r = equalized_odds_gaps(p, y, g, 2, 0.5);
    CHECK(!r.rates[1].fnr.has_value());
    CHECK(!r.rates[0].fpr.has_value());
    CHECK(!r.gaps[0].fnr_gap.has_value());
    CHECK(!r.gaps[0].fpr_gap.has_value());
  }

  SUBCASE("gap is symmetric under group relabeling") {
    Rng rng(106);
    std::vector<double> p(40);
    std::vector<int> y(40), g(40), swapped(40);
    for (int i = 0; i < 40; ++i) {
      p[i] = rng.uniform();
      y[i] = rng.bernoulli(0.5);
      g[i] = static_cast<int>(rng.below(2));
      swapped[i] = 1 - g[i];
    }
    const auto r1 = equalized_odds_gaps(p, y, g, 2, 0.5);
    const auto r2 = equalized_odds_gaps(p, y, swapped, 2, 0.5);
    CHECK(*r1.gaps[0].fpr_gap == *r2.gaps[0].fpr_gap);
    CHECK(*r1.gaps[0].fnr_gap == *r2.gaps[0].fnr_gap);
  }
}

TEST_CASE("demographic parity gaps") {
  SUBCASE("identical prediction multisets per group") {
    const std::vector<double> p{0.9, 0.1, 0.9, 0.1};
    const std::vector<int> g{0, 0, 1, 1};
    const auto r = demographic_parity_gaps(p, g, 2, 0.5);
    CHECK(*r.gaps[0].gap == 0.0);
  }
  SUBCASE("fully split groups reach gap one") {
    const std::vector<double> p{0.9, 0.8, 0.1, 0.2};
    const std::vector<int> g{0, 0, 1, 1};
    const auto r = demographic_parity_gaps(p, g, 2, 0.5);
    CHECK(*r.gaps[0].gap == 1.0);
  }
  SUBCASE("hand case at the default threshold") {
    const std::vector<double> p{0.6, 0.4, 0.5, 0.1, 0.9, 0.7};
    const std::vector<int> g{0, 0, 0, 1, 1, 1};
    const auto r = demographic_parity_gaps(p, g, 2, 0.5);
    CHECK(*r.positive_rates[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(*r.positive_rates[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(*r.gaps[0].gap == 0.0);
  }
}

TEST_CASE("expected utility per stratum") {
  UtilitySpec spec;
  spec.alpha_0 = 1.0;
  spec.alpha_1 = 0.8;
  spec.threshold = 0.5;

  SUBCASE("perfect predictor earns full benefit everywhere") {
    const std::vector<double> p{0.9, 0.1, 0.8, 0.2};
    const std::vector<int> y{1, 0, 1, 0};
    const std::vector<int> g{0, 0, 1, 1};
    const auto r = expected_utility(p, y, g, 2, spec);
    for (int s = 0; s < 2; ++s)
      for (int grp = 0; grp < 2; ++grp) CHECK(*r.values[s][grp].value == 1.0);
    CHECK(*r.gaps[0][0].gap == 0.0);
    CHECK(*r.gaps[1][0].gap == 0.0);
  }

  SUBCASE("formula check: alpha_0 = 1 and FPR 0.3 gives 0.7") {
    // ten negatives in one group, three called positive
    std::vector<double> p(10, 0.1);
    p[0] = p[1] = p[2] = 0.9;
    const std::vector<int> y(10, 0);
    const std::vector<int> g(10, 0);
    UtilitySpec unit;
    const auto r = expected_utility(p, y, g, 1, unit);
    CHECK(*r.values[0][0].value == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(r.values[0][0].count == 10);
    CHECK(!r.values[1][0].value.has_value());
  }

  SUBCASE("matching confusion profiles give exactly zero benefit gaps") {
    // both groups: y=0 {FP, TN}, y=1 {TP, FN}
    const std::vector<double> p{0.9, 0.1, 0.9, 0.1, 0.9, 0.1, 0.9, 0.1};
    const std::vector<int> y{0, 0, 1, 1, 0, 0, 1, 1};
    const std::vector<int> g{0, 0, 0, 0, 1, 1, 1, 1};
    const auto r = expected_utility(p, y, g, 2, spec);
    CHECK(*r.gaps[0][0].gap == 0.0);
    CHECK(*r.gaps[1][0].gap == 0.0);
    CHECK(*r.values[0][0].value == *r.values[0][1].value);
  }

  SUBCASE("unit costs keep the value inside the unit interval") {
    Rng rng(107);
    std::vector<double> p(30);
    std::vector<int> y(30), g(30);
    for (int i = 0; i < 30; ++i) {
      p[i] = rng.uniform();
      y[i] = rng.bernoulli(0.5);
      g[i] = static_cast<int>(rng.below(3));
    }
    const auto r = expected_utility(p, y, g, 3, spec);
    for (int s = 0; s < 2; ++s)
      for (const auto& cell : r.values[s])
        if (cell.value) {
          CHECK(*cell.value >= 0.0);
          CHECK(*cell.value <= 1.0);
        }
  }

  SUBCASE("invalid spec is rejected") {
    UtilitySpec bad = spec;
    bad.threshold = 1.0;
    const std::vector<double> p{0.5};
    const std::vector<int> y{1};
    const std::vector<int> g{0};
    CHECK_THROWS_AS(expected_utility(p, y, g, 1, bad), ConfigError);
  }
}

TEST_CASE("clp aggregate over bundles") {
  SUBCASE("constant logits vanish") {
    Fabricated f;
    push_sample(f, 0, 1, 0.5, {{1, 1}}, {0.5});
    CHECK(clp_aggregate(f.bundles, f.scores) == 0.0);
  }
  SUBCASE("single unit term") {
    Fabricated f;
    push_sample(f, 0, 1, 0.5, {{1, 1}}, {0.5});
    f.scores[0].factual_logits = Eigen::Vector2d(1.0, 0.0);
    f.scores[0].cf_logits[0] = Eigen::Vector2d(0.0, 1.0);
    CHECK(clp_aggregate(f.bundles, f.scores) == 1.0);
  }
  SUBCASE("mean of terms zero one two") {
    Fabricated f;
    push_sample(f, 0, 1, 0.5, {{1, 1}}, {0.5});
    push_sample(f, 0, 1, 0.5, {{1, 1}}, {0.5});
    push_sample(f, 0, 1, 0.5, {{1, 1}}, {0.5});
    f.scores[1].cf_logits[0] = f.scores[1].factual_logits +
                               Eigen::Vector2d(1.0, 1.0);  // term 1
    f.scores[2].cf_logits[0] = f.scores[2].factual_logits +
                               Eigen::Vector2d(std::sqrt(2.0), std::sqrt(2.0));
    CHECK(clp_aggregate(f.bundles, f.scores) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("counterfactual difference matrices") {
  SUBCASE("attribute-blind scores give the zero matrix") {
    Fabricated f;
    push_sample(f, 0, 1, 0.6, {{1, 1}}, {0.6});
    push_sample(f, 1, 0, 0.3, {{0, 0}}, {0.3});
    const auto m = cf_diff_matrix(f.bundles, f.scores, 2, std::nullopt);
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) CHECK(m.at(a, b).mean_diff == 0.0);
    CHECK(m.at(0, 1).count == 1);
    CHECK(m.at(0, 0).count == 0);
  }

  SUBCASE("hand enumeration with outcome conditioning") {
    Fabricated f;
    // factual group 0, y=1, counterfactual y_cf=1: qualifies for y*=1
    push_sample(f, 0, 1, 0.5, {{1, 1}}, {0.8});
    // factual group 0, y=1, counterfactual y_cf=0: dropped when y*=1
    push_sample(f, 0, 1, 0.5, {{1, 0}}, {0.9});
    // factual group 0, y=0: dropped when y*=1
    push_sample(f, 0, 0, 0.2, {{1, 1}}, {0.4});

    const auto m1 = cf_diff_matrix(f.bundles, f.scores, 2, 1);
    CHECK(m1.at(0, 1).count == 1);
    CHECK(m1.at(0, 1).mean_diff == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(m1.at(1, 0).count == 0);

    const auto m0 = cf_diff_matrix(f.bundles, f.scores, 2, 0);
    CHECK(m0.at(0, 1).count == 0);  // that sample's y_cf is 1, not 0

    const auto all = cf_diff_matrix(f.bundles, f.scores, 2, std::nullopt);
    CHECK(all.at(0, 1).count == 3);
    CHECK(all.at(0, 1).mean_diff ==
          doctest::Approx((0.3 + 0.4 + 0.2) / 3.0).epsilon(1e-12));
  }

  SUBCASE("conditioning on an absent outcome flags every cell empty") {
    Fabricated f;
    push_sample(f, 0, 0, 0.2, {{1, 0}}, {0.4});
    const auto m = cf_diff_matrix(f.bundles, f.scores, 2, 1);
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) CHECK(m.at(a, b).count == 0);
  }

  SUBCASE("the diagonal stays structurally zero") {
    Fabricated f;
    push_sample(f, 0, 1, 0.5, {{1, 1}}, {0.8});
    const auto m = cf_diff_matrix(f.bundles, f.scores, 2, std::nullopt);
    CHECK(m.at(0, 0).mean_diff == 0.0);
    CHECK(m.at(1, 1).mean_diff == 0.0);
  }
}

TEST_CASE("model metrics aggregate the pieces consistently") {
  Rng rng(108);
  Fabricated f;
  for (int i = 0; i < 60; ++i) {
    const int a = static_cast<int>(rng.below(2));
    const int y = rng.bernoulli(0.5);
    const double pf = rng.uniform();
    const double pc = rng.uniform();
    push_sample(f, a, y, 0.02 + 0.96 * pf, {{1 - a, rng.bernoulli(0.5)}},
                {0.02 + 0.96 * pc});
  }
  UtilitySpec spec;
  const auto mm = compute_model_metrics(f.bundles, f.scores, 2, spec);

  std::vector<double> p;
  std::vector<int> y;
  for (std::size_t i = 0; i < f.bundles.size(); ++i) {
    p.push_back(f.scores[i].p_factual);
    y.push_back(f.bundles[i].y);
  }
  CHECK(*mm.overall.auc_roc == auc_roc(p, y));
  CHECK(*mm.overall.auc_prc == auc_prc(p, y));
  CHECK(mm.overall.brier == brier(p, y));
  CHECK(mm.overall.count == 60);
  CHECK(mm.per_group.size() == 2);
  CHECK(mm.per_group[0].count + mm.per_group[1].count == 60);
  CHECK(mm.clp == clp_aggregate(f.bundles, f.scores));
  CHECK(mm.cf_diff_y1.outcome.has_value());
  CHECK(!mm.cf_diff_all.outcome.has_value());

  SUBCASE("single-class slices surface as absent values") {
    Fabricated g;
    push_sample(g, 0, 1, 0.7, {{1, 1}}, {0.6});
    push_sample(g, 1, 1, 0.6, {{0, 1}}, {0.5});
    push_sample(g, 1, 0, 0.4, {{0, 0}}, {0.5});
    const auto mg = compute_model_metrics(g.bundles, g.scores, 2, spec);
    CHECK(!mg.per_group[0].auc_roc.has_value());  // group 0 is all positive
    CHECK(mg.per_group[0].auc_prc.has_value());
    CHECK(mg.per_group[1].auc_roc.has_value());
  }
}
