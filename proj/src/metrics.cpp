#include "cfodds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cfodds/errors.hpp"

namespace cfodds::metrics {

void UtilitySpec::validate() const {
  if (!(alpha_0 > 0.0)) throw ConfigError("alpha_0 must be positive");
  if (!(alpha_1 > 0.0)) throw ConfigError("alpha_1 must be positive");
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("threshold must lie strictly inside (0,1)");
}

namespace {

void check_labels(std::span<const int> labels) {
  for (int y : labels)
    if (y != 0 && y != 1)
      throw ConfigError("labels must be 0 or 1, got " + std::to_string(y));
}

void check_paired(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": size mismatch (" +
                     std::to_string(a) + " vs " + std::to_string(b) + ")");
}

void check_groups(std::span<const int> groups, int group_count) {
  if (group_count <= 0) throw ConfigError("group_count must be positive");
  for (int g : groups)
    if (g < 0 || g >= group_count)
      throw ConfigError("group value " + std::to_string(g) + " out of range");
}

std::optional<double> abs_gap(const std::optional<double>& a,
                              const std::optional<double>& b) {
  if (!a || !b) return std::nullopt;
  return std::abs(*a - *b);
}

}  // namespace

std::vector<int> predict_at(std::span<const double> probabilities,
                            double threshold) {
  std::vector<int> yhat(probabilities.size());
  for (std::size_t i = 0; i < probabilities.size(); ++i)
    yhat[i] = probabilities[i] >= threshold ? 1 : 0;
  return yhat;
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  check_paired(scores.size(), labels.size(), "auc_roc");
  check_labels(labels);
  const std::size_t n = scores.size();
  long positives = 0;
  for (int y : labels) positives += y;
  const long negatives = static_cast<long>(n) - positives;
  if (positives == 0 || negatives == 0)
    throw UndefinedMetricError("auc_roc needs both classes present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Midranks keep the tie correction exact: every rank is an integer or an
  // exact half, so the positive rank sum carries no rounding.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos -
                   0.5 * static_cast<double>(positives) *
                       static_cast<double>(positives + 1);
  return u / (static_cast<double>(positives) * static_cast<double>(negatives));
}

double auc_prc(std::span<const double> scores, std::span<const int> labels) {
  check_paired(scores.size(), labels.size(), "auc_prc");
  check_labels(labels);
  const std::size_t n = scores.size();
  long positives = 0;
  for (int y : labels) positives += y;
  if (positives == 0)
    throw UndefinedMetricError("auc_prc needs at least one positive");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // One cut per distinct score; precision is evaluated after the whole tie
  // group enters, weighted by that group's recall increment.
  double ap = 0.0;
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    long group_tp = 0, group_fp = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] == 1)
        ++group_tp;
      else
        ++group_fp;
      ++j;
    }
    tp += group_tp;
    fp += group_fp;
    if (group_tp > 0) {
      const double precision =
          static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double recall_step =
          static_cast<double>(group_tp) / static_cast<double>(positives);
      ap += recall_step * precision;
    }
    i = j;
  }
  return ap;
}

double brier(std::span<const double> probabilities, std::span<const int> labels) {
  check_paired(probabilities.size(), labels.size(), "brier");
  check_labels(labels);
  if (probabilities.empty()) throw UndefinedMetricError("brier of an empty set");
  double acc = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    if (!(probabilities[i] >= 0.0 && probabilities[i] <= 1.0))
      throw ConfigError("brier needs probabilities in [0,1]");
    const double d = probabilities[i] - static_cast<double>(labels[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(probabilities.size());
}

EqualizedOddsReport equalized_odds_gaps(std::span<const double> probabilities,
                                        std::span<const int> labels,
                                        std::span<const int> groups,
                                        int group_count, double threshold) {
  check_paired(probabilities.size(), labels.size(), "equalized_odds_gaps");
  check_paired(probabilities.size(), groups.size(), "equalized_odds_gaps");
  check_labels(labels);
  check_groups(groups, group_count);
  const auto yhat = predict_at(probabilities, threshold);

  EqualizedOddsReport report;
  report.rates.resize(group_count);
  std::vector<long> fp(group_count, 0), tn(group_count, 0);
  std::vector<long> fn(group_count, 0), tp(group_count, 0);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const int g = groups[i];
    ++report.rates[g].count;
    if (labels[i] == 0) {
      ++(yhat[i] == 1 ? fp[g] : tn[g]);
    } else {
      ++(yhat[i] == 0 ? fn[g] : tp[g]);
    }
  }
  for (int g = 0; g < group_count; ++g) {
    if (fp[g] + tn[g] > 0)
      report.rates[g].fpr =
          static_cast<double>(fp[g]) / static_cast<double>(fp[g] + tn[g]);
    if (fn[g] + tp[g] > 0)
      report.rates[g].fnr =
          static_cast<double>(fn[g]) / static_cast<double>(fn[g] + tp[g]);
  }
  for (int a = 0; a < group_count; ++a)
    for (int b = a + 1; b < group_count; ++b) {
      RateGap gap;
      gap.group_a = a;
      gap.group_b = b;
      gap.fpr_gap = abs_gap(report.rates[a].fpr, report.rates[b].fpr);
      gap.fnr_gap = abs_gap(report.rates[a].fnr, report.rates[b].fnr);
      report.gaps.push_back(gap);
    }
  return report;
}

DemographicParityReport demographic_parity_gaps(
    std::span<const double> probabilities, std::span<const int> groups,
    int group_count, double threshold) {
  check_paired(probabilities.size(), groups.size(), "demographic_parity_gaps");
  check_groups(groups, group_count);
  const auto yhat = predict_at(probabilities, threshold);

  DemographicParityReport report;
  report.positive_rates.resize(group_count);
  std::vector<long> pos(group_count, 0), total(group_count, 0);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    ++total[groups[i]];
    pos[groups[i]] += yhat[i];
  }
  for (int g = 0; g < group_count; ++g)
    if (total[g] > 0)
      report.positive_rates[g] =
          static_cast<double>(pos[g]) / static_cast<double>(total[g]);
  for (int a = 0; a < group_count; ++a)
    for (int b = a + 1; b < group_count; ++b) {
      ParityGap gap;
      gap.group_a = a;
      gap.group_b = b;
      gap.gap = abs_gap(report.positive_rates[a], report.positive_rates[b]);
      report.gaps.push_back(gap);
    }
  return report;
}

UtilityReport expected_utility(std::span<const double> probabilities,
                               std::span<const int> labels,
                               std::span<const int> groups, int group_count,
                               const UtilitySpec& spec) {
  spec.validate();
  check_paired(probabilities.size(), labels.size(), "expected_utility");
  check_paired(probabilities.size(), groups.size(), "expected_utility");
  check_labels(labels);
  check_groups(groups, group_count);
  const auto yhat = predict_at(probabilities, spec.threshold);

  UtilityReport report;
  for (int s = 0; s < 2; ++s) {
    report.values[s].resize(group_count);
    std::vector<long> errors(group_count, 0);
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (labels[i] != s) continue;
      auto& cell = report.values[s][groups[i]];
      ++cell.count;
      // The costed mistake is a positive call in the y=0 stratum and a
      // negative call in the y=1 stratum.
      if (yhat[i] != s) ++errors[groups[i]];
    }
    const double alpha = s == 0 ? spec.alpha_0 : spec.alpha_1;
    for (int g = 0; g < group_count; ++g) {
      auto& cell = report.values[s][g];
      if (cell.count > 0) {
        const double rate =
            static_cast<double>(errors[g]) / static_cast<double>(cell.count);
        cell.value = 1.0 - alpha * rate;
      }
    }
    for (int a = 0; a < group_count; ++a)
      for (int b = a + 1; b < group_count; ++b) {
        BenefitGap gap;
        gap.group_a = a;
        gap.group_b = b;
        gap.gap = abs_gap(report.values[s][a].value, report.values[s][b].value);
        report.gaps[s].push_back(gap);
      }
  }
  return report;
}

double clp_aggregate(std::span<const cevae::CounterfactualBundle> bundles,
                     std::span<const fair::BundleScores> scores) {
  check_paired(bundles.size(), scores.size(), "clp_aggregate");
  if (bundles.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const auto& b = bundles[i];
    const auto& s = scores[i];
    check_paired(b.counterfactuals.size(), s.cf_logits.size(), "clp_aggregate");
    for (std::size_t j = 0; j < b.counterfactuals.size(); ++j)
      total += fair::clp_term(s.factual_logits, s.cf_logits[j], b.y,
                              b.counterfactuals[j].y_cf);
  }
  return total / static_cast<double>(bundles.size());
}

const CfDiffCell& CfDiffMatrix::at(int a, int a_prime) const {
  if (a < 0 || a >= group_count || a_prime < 0 || a_prime >= group_count)
    throw ShapeError("cf_diff_matrix index out of range");
  return cells[static_cast<std::size_t>(a) * group_count + a_prime];
}

CfDiffMatrix cf_diff_matrix(std::span<const cevae::CounterfactualBundle> bundles,
                            std::span<const fair::BundleScores> scores,
                            int group_count, std::optional<int> outcome) {
  check_paired(bundles.size(), scores.size(), "cf_diff_matrix");
  if (group_count <= 0) throw ConfigError("group_count must be positive");
  if (outcome && *outcome != 0 && *outcome != 1)
    throw ConfigError("conditioning outcome must be 0 or 1");

  CfDiffMatrix m;
  m.group_count = group_count;
  m.outcome = outcome;
  m.cells.assign(static_cast<std::size_t>(group_count) * group_count, {});
  std::vector<double> sums(m.cells.size(), 0.0);

  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const auto& b = bundles[i];
    const auto& s = scores[i];
    check_paired(b.counterfactuals.size(), s.p_cf.size(), "cf_diff_matrix");
    if (b.a < 0 || b.a >= group_count)
      throw ConfigError("bundle group out of range");
    if (outcome && b.y != *outcome) continue;
    for (std::size_t j = 0; j < b.counterfactuals.size(); ++j) {
      const auto& cf = b.counterfactuals[j];
      if (cf.a_target < 0 || cf.a_target >= group_count)
        throw ConfigError("counterfactual group out of range");
      if (outcome && cf.y_cf != *outcome) continue;
      const std::size_t cell =
          static_cast<std::size_t>(b.a) * group_count + cf.a_target;
      sums[cell] += s.p_cf[j] - s.p_factual;
      ++m.cells[cell].count;
    }
  }
  for (std::size_t c = 0; c < m.cells.size(); ++c)
    if (m.cells[c].count > 0)
      m.cells[c].mean_diff = sums[c] / static_cast<double>(m.cells[c].count);
  return m;
}

ModelMetrics compute_model_metrics(
    std::span<const cevae::CounterfactualBundle> bundles,
    std::span<const fair::BundleScores> scores, int group_count,
    const UtilitySpec& spec) {
  check_paired(bundles.size(), scores.size(), "compute_model_metrics");
  spec.validate();

  std::vector<double> probs(bundles.size());
  std::vector<int> labels(bundles.size());
  std::vector<int> groups(bundles.size());
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    probs[i] = scores[i].p_factual;
    labels[i] = bundles[i].y;
    groups[i] = bundles[i].a;
  }
  check_groups(groups, group_count);

  auto slice_metrics = [](std::span<const double> p, std::span<const int> y) {
    ScalarMetrics sm;
    sm.count = static_cast<long>(p.size());
    long positives = 0;
    for (int v : y) positives += v;
    if (positives > 0 && positives < static_cast<long>(y.size()))
      sm.auc_roc = auc_roc(p, y);
    if (positives > 0) sm.auc_prc = auc_prc(p, y);
    if (!p.empty()) sm.brier = brier(p, y);
    return sm;
  };

  ModelMetrics out;
  out.overall = slice_metrics(probs, labels);
  out.per_group.resize(group_count);
  for (int g = 0; g < group_count; ++g) {
    std::vector<double> gp;
    std::vector<int> gy;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (groups[i] == g) {
        gp.push_back(probs[i]);
        gy.push_back(labels[i]);
      }
    out.per_group[g] = slice_metrics(gp, gy);
  }
  out.equalized_odds =
      equalized_odds_gaps(probs, labels, groups, group_count, spec.threshold);
  out.demographic_parity =
      demographic_parity_gaps(probs, groups, group_count, spec.threshold);
  out.utility = expected_utility(probs, labels, groups, group_count, spec);
  out.clp = clp_aggregate(bundles, scores);
  out.cf_diff_y0 = cf_diff_matrix(bundles, scores, group_count, 0);
  out.cf_diff_y1 = cf_diff_matrix(bundles, scores, group_count, 1);
  out.cf_diff_all = cf_diff_matrix(bundles, scores, group_count, std::nullopt);
  return out;
}

}  // namespace cfodds::metrics
