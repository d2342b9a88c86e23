#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "cfodds/fair.hpp"

namespace cfodds::metrics {

// Misclassification costs and the decision threshold. Costs at most 1 keep
// the utility values inside [0, 1].
struct UtilitySpec {
  double alpha_0 = 1.0;  // false-positive cost
  double alpha_1 = 1.0;  // false-negative cost
  double threshold = 0.5;

  void validate() const;
};

// Hard decisions: predict 1 when probability >= threshold. Every thresholded
// metric below routes through this rule.
std::vector<int> predict_at(std::span<const double> probabilities,
                            double threshold);

// Mann-Whitney statistic, exact under ties: P(s+ > s-) + P(s+ = s-)/2.
// Throws UndefinedMetricError unless both classes are present.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

// Average precision with equal scores grouped at one cut. Throws
// UndefinedMetricError when there are no positives.
double auc_prc(std::span<const double> scores, std::span<const int> labels);

// Mean squared difference between probability and label.
double brier(std::span<const double> probabilities, std::span<const int> labels);

// Per-group error rates at a threshold. A rate is absent when the group has
// no sample of the class that defines it.
struct GroupRates {
  std::optional<double> fpr;  // needs negatives
  std::optional<double> fnr;  // needs positives
  long count = 0;
};

struct RateGap {
  int group_a = 0;
  int group_b = 0;
  std::optional<double> fpr_gap;  // absent when either side is undefined
  std::optional<double> fnr_gap;
};

struct EqualizedOddsReport {
  std::vector<GroupRates> rates;  // size K
  std::vector<RateGap> gaps;      // unordered pairs, group_a < group_b
};

EqualizedOddsReport equalized_odds_gaps(std::span<const double> probabilities,
                                        std::span<const int> labels,
                                        std::span<const int> groups,
                                        int group_count, double threshold);

struct ParityGap {
  int group_a = 0;
  int group_b = 0;
  std::optional<double> gap;
};

struct DemographicParityReport {
  std::vector<std::optional<double>> positive_rates;  // size K, absent if empty
  std::vector<ParityGap> gaps;
};

DemographicParityReport demographic_parity_gaps(
    std::span<const double> probabilities, std::span<const int> groups,
    int group_count, double threshold);

// Empirical group benefit per outcome stratum: within y=0 the mean utility is
// 1 - alpha_0 * FPR, within y=1 it is 1 - alpha_1 * FNR. Cells without
// samples are absent rather than fabricated.
struct UtilityCell {
  std::optional<double> value;
  long count = 0;
};

struct BenefitGap {
  int group_a = 0;
  int group_b = 0;
  std::optional<double> gap;
};

struct UtilityReport {
  std::array<std::vector<UtilityCell>, 2> values;  // [stratum y][group]
  std::array<std::vector<BenefitGap>, 2> gaps;
};

UtilityReport expected_utility(std::span<const double> probabilities,
                               std::span<const int> labels,
                               std::span<const int> groups, int group_count,
                               const UtilitySpec& spec);

// Mean over factual samples of the summed outcome-gated pairing terms.
double clp_aggregate(std::span<const cevae::CounterfactualBundle> bundles,
                     std::span<const fair::BundleScores> scores);

// Mean predicted-probability shift per (factual group, intervened group)
// cell. count == 0 marks a cell with no qualifying samples; the diagonal is
// structurally zero.
struct CfDiffCell {
  double mean_diff = 0.0;
  long count = 0;
};

struct CfDiffMatrix {
  int group_count = 0;
  std::optional<int> outcome;  // conditioning value, absent = unconditioned
  std::vector<CfDiffCell> cells;  // row-major, row = factual group

  const CfDiffCell& at(int a, int a_prime) const;
};

// Cell (a, a') averages p_cf(a') - p_factual over samples with factual group
// a; with an outcome condition y*, only samples with y = y* and the a' draw
// y_cf = y* qualify. Positive entries mean the counterfactual scored higher.
CfDiffMatrix cf_diff_matrix(std::span<const cevae::CounterfactualBundle> bundles,
                            std::span<const fair::BundleScores> scores,
                            int group_count, std::optional<int> outcome);

struct ScalarMetrics {
  std::optional<double> auc_roc;  // absent when the slice is single-class
  std::optional<double> auc_prc;  // absent without positives
  double brier = 0.0;
  long count = 0;
};

// Everything the evaluation stage reports for one model on one bundle set.
struct ModelMetrics {
  ScalarMetrics overall;
  std::vector<ScalarMetrics> per_group;  // size K
  EqualizedOddsReport equalized_odds;
  DemographicParityReport demographic_parity;
  UtilityReport utility;
  double clp = 0.0;
  CfDiffMatrix cf_diff_y0;
  CfDiffMatrix cf_diff_y1;
  CfDiffMatrix cf_diff_all;
};

ModelMetrics compute_model_metrics(
    std::span<const cevae::CounterfactualBundle> bundles,
    std::span<const fair::BundleScores> scores, int group_count,
    const UtilitySpec& spec);

}  // namespace cfodds::metrics
