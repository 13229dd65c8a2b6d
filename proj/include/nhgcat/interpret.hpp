#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nhgcat/evaluation.hpp"
#include "nhgcat/stats.hpp"

namespace nhgcat {

// Evaluation-mode traces (attention, level masks, mixing weights, effect) of
// the given subjects.
std::vector<SubjectTrace> collect_traces(const Model& model, std::span<const SubjectFeatures> features,
                                         std::span<const std::size_t> idx, const GroupTemplates& templates,
                                         double tau);

// ---------------------------------------------------------------------------
// Frequency-band ablation

struct Band {
  double lo_hz = 0.0;
  double hi_hz = 0.0;
};

inline constexpr Band kLowBand{0.01, 0.08};
inline constexpr Band kHighBand{0.1, 0.25};

// Recomputes every feature from band-filtered BOLD.
std::vector<SubjectFeatures> band_features(const Cohort& cohort, const FeatureConfig& config, Band band);

struct FrequencyAblation {
  Band low, high;
  std::vector<std::string> splits;
  std::vector<double> auc_low, auc_high;
  TTest test;  // paired over splits, low minus high
  bool tested = false;  // false with fewer than 2 splits
};

// Scores the already-trained split models on band-filtered inputs.
FrequencyAblation frequency_ablation(const CvResult& cv, const Experiment& experiment, const Cohort& cohort,
                                     Band low = kLowBand, Band high = kHighBand);

// ---------------------------------------------------------------------------
// Hierarchical level statistics

struct RegionLevelStat {
  std::size_t region = 0;
  Circuit circuit = Circuit::DMN;
  std::size_t level = 0;  // 1-based
  double p_mdd = 0.0, p_hc = 0.0;
  double diff_norm = 0.0;  // (p_mdd - p_hc) / max |p_mdd - p_hc|
  double chi2 = 0.0, p = 1.0;
  std::size_t count_mdd = 0, count_hc = 0;
};

// Assigns each region of each subject to the level with the largest mask
// value (ties to the lower level), then compares level proportions between
// groups per region with a 2 x depth chi-square test.
std::vector<RegionLevelStat> hierarchy_stats(std::span<const SubjectTrace> traces, std::span<const int> labels,
                                             const CircuitAtlas& atlas);

// ---------------------------------------------------------------------------
// Circuit attention report

struct AttentionEdge {
  int group = 0;  // label
  Circuit source = Circuit::DMN;  // attending circuit (row)
  Circuit target = Circuit::DMN;  // attended circuit (column)
  double raw = 0.0;
  double norm = 0.0;
};

struct AttentionReport {
  Matrix mean_hc, mean_mdd;
  std::vector<AttentionEdge> edges;  // retained edges, HC then MDD, by source
};

// Group means, then the two strongest off-diagonal entries per row (ties to
// the lower column) normalized by the largest retained weight of either group.
AttentionReport attention_report(std::span<const SubjectTrace> traces, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Output files

void write_frequency_ablation(const std::filesystem::path& path, const FrequencyAblation& report);
void write_hierarchy_stats(const std::filesystem::path& path, std::span<const RegionLevelStat> stats);
void write_attention_edges(const std::filesystem::path& path, const AttentionReport& report);
// Nodes, the full group-mean matrices, retained edges and the pruned ones.
void write_chord(const std::filesystem::path& path, const AttentionReport& report);
// region, circuit, subject, label, one column per level.
void write_masks(const std::filesystem::path& path, std::span<const SubjectTrace> traces, std::span<const int> labels,
                 const CircuitAtlas& atlas);

}  // namespace nhgcat
