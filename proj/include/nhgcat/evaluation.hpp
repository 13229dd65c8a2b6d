#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nhgcat/metrics.hpp"
#include "nhgcat/training.hpp"

namespace nhgcat {

struct Split {
  std::string id;  // "fold0", "site2", ...
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified k-fold: each class is shuffled and dealt round-robin, so every
// fold holds its class share to within one subject.
std::vector<Split> stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed);

// One split per site, holding that site out.
std::vector<Split> site_splits(std::span<const int> sites);

// Throws DataError unless train and test are disjoint, in range, and (when
// `covering`) the test sets of all splits partition 0..n-1.
void audit_splits(std::span<const Split> splits, std::size_t n, bool covering);

struct Experiment {
  ModelConfig model;
  TrainConfig train;
  FeatureConfig features;
  std::uint64_t seed = 7;
};

struct SplitMetrics {
  std::size_t n = 0;
  std::optional<double> acc, auc, sen, spe, f1, ap;
};

SplitMetrics score(std::span<const double> probability, std::span<const int> labels);

struct SplitOutcome {
  Split split;
  std::vector<std::size_t> inner_train, validation;
  GroupTemplates templates;
  FitResult fit;
  Prediction test;
  SplitMetrics metrics;
};

struct MetricSummary {
  SplitMetrics mean, sd, weighted;
};

struct CvResult {
  std::string protocol;  // "kfold" or "loso"
  std::vector<SplitOutcome> splits;
  MetricSummary summary;
};

// Mean, sample standard deviation and test-size weighted mean of each metric
// over the splits that define it.
MetricSummary summarize(std::span<const SplitMetrics> rows);

// Trains one model per split. Group templates come from the split's training
// subjects only. `jobs` splits run concurrently; results do not depend on it.
CvResult run_cv(const CircuitAtlas& atlas, std::span<const SubjectFeatures> features, std::vector<Split> splits,
                const Experiment& experiment, const std::string& protocol, std::size_t jobs = 1);

SplitOutcome run_split(const CircuitAtlas& atlas, std::span<const SubjectFeatures> features, const Split& split,
                       const Experiment& experiment);

// Rebuilds the trained model of a split.
Model trained_model(const Experiment& experiment, const CircuitAtlas& atlas, const SplitOutcome& outcome);

// Run directory per split plus an aggregate metrics.json in `root`.
void write_cv(const std::filesystem::path& root, const CvResult& result, const Experiment& experiment,
              std::span<const SubjectFeatures> features);

struct LoadedRun {
  Experiment experiment;
  std::string protocol;
  SplitOutcome outcome;  // split, templates, best parameters and tau; no history
};

// The experiment stored in a run directory's config.json.
Experiment read_run_experiment(const std::filesystem::path& dir);

// Reads one run directory written by write_cv, resolving subject ids against
// `features`.
LoadedRun load_run(const std::filesystem::path& dir, const CircuitAtlas& atlas,
                   std::span<const SubjectFeatures> features);

// All run directories listed in `root`/metrics.json, in split order.
std::vector<LoadedRun> load_runs(const std::filesystem::path& root, const CircuitAtlas& atlas,
                                 std::span<const SubjectFeatures> features);

}  // namespace nhgcat
