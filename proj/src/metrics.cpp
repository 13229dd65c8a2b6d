#include "nhgcat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "nhgcat/errors.hpp"

namespace nhgcat {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* op) {
  if (scores.size() != labels.size())
    throw UsageError(std::string(op) + ": " + std::to_string(scores.size()) + " scores but " +
                     std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l != 0 && l != 1) throw DataError(std::string(op) + ": label " + std::to_string(l) + " is not 0 or 1");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericalError(std::string(op) + ": non-finite score");
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

// Indices sorted by descending score.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

std::size_t positives(std::span<const int> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

}  // namespace

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_inputs(scores, labels, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

ClassificationMetrics confusion_metrics(std::span<const double> scores, std::span<const int> labels,
                                        double threshold) {
  ClassificationMetrics m;
  m.counts = confusion(scores, labels, threshold);
  const auto& c = m.counts;
  m.acc = ratio(c.tp + c.tn, c.total());
  m.sen = ratio(c.tp, c.tp + c.fn);
  m.spe = ratio(c.tn, c.tn + c.fp);
  m.precision = ratio(c.tp, c.tp + c.fp);
  if (m.sen && m.precision) {
    const double s = *m.sen + *m.precision;
    m.f1 = s > 0.0 ? 2.0 * *m.sen * *m.precision / s : 0.0;
  }
  return m;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "roc_auc");
  const std::size_t pos = positives(labels), neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("roc_auc: both classes must be present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks of the ascending order; U = R+ - pos(pos+1)/2.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += midrank;
    i = j;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "average_precision");
  const std::size_t pos = positives(labels);
  if (pos == 0) throw DataError("average_precision: no positive labels");
  const auto order = descending(scores);
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, block_tp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) block_tp += labels[order[j++]] == 1;
    tp += block_tp;
    seen = j;
    ap += static_cast<double>(block_tp) / static_cast<double>(pos) * static_cast<double>(tp) /
          static_cast<double>(seen);
    i = j;
  }
  return ap;
}

std::vector<CurvePoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "roc_curve");
  const std::size_t pos = positives(labels), neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("roc_curve: both classes must be present");
  const auto order = descending(scores);
  std::vector<CurvePoint> out{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) (labels[order[j++]] == 1 ? tp : fp)++;
    out.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos)});
    i = j;
  }
  return out;
}

std::vector<CurvePoint> pr_curve(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "pr_curve");
  const std::size_t pos = positives(labels);
  if (pos == 0) throw DataError("pr_curve: no positive labels");
  const auto order = descending(scores);
  std::vector<CurvePoint> out;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) tp += labels[order[j++]] == 1;
    out.push_back({static_cast<double>(tp) / static_cast<double>(pos), static_cast<double>(tp) / static_cast<double>(j)});
    i = j;
  }
  return out;
}

std::vector<DecisionPoint> decision_curve(std::span<const double> scores, std::span<const int> labels,
                                          std::span<const double> thresholds) {
  check_inputs(scores, labels, "decision_curve");
  if (scores.empty()) throw DataError("decision_curve: no subjects");
  const double n = static_cast<double>(scores.size());
  const double prevalence = static_cast<double>(positives(labels)) / n;
  std::vector<DecisionPoint> out;
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw UsageError("decision_curve: threshold " + std::to_string(t) + " outside (0, 1)");
    const auto c = confusion(scores, labels, t);
    const double odds = t / (1.0 - t);
    DecisionPoint p;
    p.threshold = t;
    p.model = static_cast<double>(c.tp) / n - static_cast<double>(c.fp) / n * odds;
    p.treat_all = prevalence - (1.0 - prevalence) * odds;
    p.treat_none = 0.0;
    out.push_back(p);
  }
  return out;
}

}  // namespace nhgcat
