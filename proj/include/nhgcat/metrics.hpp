#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace nhgcat {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

// Undefined ratios (zero denominators) are left empty.
struct ClassificationMetrics {
  ConfusionCounts counts;
  std::optional<double> acc, sen, spe, f1, precision;
};

ClassificationMetrics confusion_metrics(std::span<const double> scores, std::span<const int> labels,
                                        double threshold = 0.5);

// Mann-Whitney statistic with ties counted as one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Step-interpolated average precision: mean precision at each positive's rank,
// with tied scores treated as one block.
double average_precision(std::span<const double> scores, std::span<const int> labels);

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
};

// (FPR, TPR) from (0,0) to (1,1), one point per distinct score.
std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
// (recall, precision), one point per distinct score.
std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const int> labels);

struct DecisionPoint {
  double threshold = 0.0;
  double model = 0.0;
  double treat_all = 0.0;
  double treat_none = 0.0;
};

// Net benefit TP/N - FP/N * t/(1-t), classifying score >= t as positive.
std::vector<DecisionPoint> decision_curve(std::span<const double> scores, std::span<const int> labels,
                                          std::span<const double> thresholds);

}  // namespace nhgcat
