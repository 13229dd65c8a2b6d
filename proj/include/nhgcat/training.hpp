#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nhgcat/gradcheck.hpp"
#include "nhgcat/model.hpp"
#include "nhgcat/optim.hpp"

namespace nhgcat {

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch = 8;
  std::size_t max_epochs = 50;
  std::size_t patience = 20;
  double kl_max = 0.1;
  std::size_t kl_warmup = 20;
  double vlca_weight = 1.0;
  double mse_start = 0.2;
  double mse_end = 1.0;
  double tau_start = 1.0;
  double tau_end = 0.5;
  double edge_dropout = 0.1;
  double max_grad_norm = 1.0;
  double balance_ratio = 10.0;
  double validation_fraction = 0.2;
};

TrainConfig desk_training();
TrainConfig full_training();

void validate(const TrainConfig& config);

struct Schedule {
  double kl = 0.0;
  double mse = 0.0;
  double tau = 1.0;
};

Schedule schedules(std::size_t epoch, const TrainConfig& config);

// Drops every edge independently with probability p.
BrainGraph edge_dropout(const BrainGraph& graph, double p, RngStream& rng);

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown loss;  // batch-size weighted means
  double val_auc = 0.0;
  double val_loss = 0.0;
  double tau = 1.0;
  bool improved = false;
};

// Per-call identity of a training run, used to label random streams.
struct RunIdentity {
  std::uint64_t seed = 0;
  std::string label;  // e.g. "fold2"
};

EpochRecord train_epoch(Model& model, OptimizerState& optimizer, std::span<const SubjectFeatures> features,
                        std::span<const std::size_t> train, const GroupTemplates& templates,
                        const TrainConfig& config, std::size_t epoch, const RunIdentity& id);

struct Prediction {
  std::vector<double> probability;  // P(MDD)
  std::vector<int> labels;
  double loss = 0.0;                // classification cross-entropy
};

// Evaluation mode: no dropout, z = mu, noise-free level assignment.
Prediction predict(const Model& model, std::span<const SubjectFeatures> features, std::span<const std::size_t> idx,
                   const GroupTemplates& templates, double tau);

struct FitResult {
  ParamStore best;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
  double best_tau = 1.0;
  std::vector<EpochRecord> history;
};

// Trains until validation AUC (ties broken by lower validation loss) fails to
// improve for `patience` epochs. The model ends holding the best parameters.
FitResult fit(Model& model, std::span<const SubjectFeatures> features, std::span<const std::size_t> train,
              std::span<const std::size_t> validation, const GroupTemplates& templates, const TrainConfig& config,
              const RunIdentity& id);

// Stratified hold-out of `fraction` of `indices` (at least one per class).
void split_validation(std::span<const SubjectFeatures> features, std::span<const std::size_t> indices,
                      double fraction, std::uint64_t seed, const std::string& label, std::vector<std::size_t>& train,
                      std::vector<std::size_t>& validation);

// checkpoint.bin: "NHGCATCK", u32 version, u64 entry count, then per entry
// u32 name length, name bytes, u32 rank, u64 extents, f64 values. Little-endian.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const GroupTemplates& templates);
void load_checkpoint(const std::filesystem::path& path, ParamStore& params, GroupTemplates& templates);

struct GradientReport {
  std::vector<ParamCheck> checks;
  std::vector<std::pair<std::string, double>> groups;  // worst error per top-level name ("rg", "hc", ...)
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t kink_retries = 0;
};

// Finite-difference check of the full training loss (every term weighted in,
// training-mode randomness replayed from a fixed stream) over `batch`.
GradientReport composite_gradcheck(Model& model, std::span<const SubjectFeatures> batch,
                                   const GroupTemplates& templates, std::size_t coords_per_param = 4,
                                   double step = 1e-5, std::uint64_t seed = 1);

void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

}  // namespace nhgcat
