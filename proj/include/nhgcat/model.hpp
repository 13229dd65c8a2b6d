#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nhgcat/hc_pooling.hpp"
#include "nhgcat/rg_fusion.hpp"
#include "nhgcat/vlca.hpp"

namespace nhgcat {

enum class Variant {
  Full,
  StandardAttention,    // classifier reads the attended circuits; no latent branch
  DeterministicCausal,  // causal branch with z = mu and no KL
  VariationalNoCausal,  // factual branch only, CE on its prediction
};

Variant parse_variant(std::string_view s);
std::string_view variant_name(Variant v);

struct ModelConfig {
  std::string preset = "desk";
  RgFusionConfig rg;
  HcPoolingConfig hc;
  VlcaConfig vlca;
  std::size_t cls_hidden1 = 128;
  std::size_t cls_hidden2 = 64;
  double cls_dropout = 0.5;
  Variant variant = Variant::Full;
};

// Dimensions for the given input geometry. Desk: d = 32, latent 8, VLCA
// attention 16. Full: d = 128, latent 16, VLCA attention 64 / latent 32.
ModelConfig desk_model(std::size_t regions, std::size_t timepoints);
ModelConfig full_model(std::size_t regions, std::size_t timepoints);
ModelConfig preset_model(std::string_view preset, std::size_t regions, std::size_t timepoints);

struct Model {
  ModelConfig config;
  CircuitAtlas atlas;
  ParamStore params;
  RgFusion rg;
  HcPooling hc;
  Vlca vlca;
  Linear cls1, cls2, cls3;
};

Model make_model(const ModelConfig& config, const CircuitAtlas& atlas, std::uint64_t seed);

struct BatchItem {
  const SubjectFeatures* subject = nullptr;
  const BrainGraph* graph = nullptr;  // may differ from subject->graph under edge dropout
};

struct ForwardOptions {
  bool training = false;
  double tau = 1.0;
  std::uint64_t seed = 0;
  std::string stream;         // label prefix for per-subject random streams
  bool use_labels = true;     // false: inference, no label-dependent terms
  bool keep_traces = false;
  const Matrix* attention_override = nullptr;
};

struct LossTerms {
  Tensor cls, kl, vlca, mse;  // invalid tensors mean the term is absent
};

struct SubjectTrace {
  std::string id;
  Matrix attention;  // 5 x 5
  std::array<Matrix, kCircuitCount> masks;
  std::array<std::array<double, 3>, kCircuitCount> mix;
  std::array<double, 2> effect{};
};

struct BatchForward {
  Tensor logits;  // B x 2
  LossTerms terms;
  std::vector<SubjectTrace> traces;
};

BatchForward forward_batch(const Model& model, Binder& bind, std::span<const BatchItem> batch,
                           const GroupTemplates& templates, const ForwardOptions& options);

struct LossWeights {
  double kl = 0.0;
  double vlca = 1.0;
  double mse = 0.2;
};

struct LossBreakdown {
  double cls = 0.0, kl = 0.0, vlca = 0.0, mse = 0.0;
  double w_kl = 0.0, w_vlca = 0.0, w_mse = 0.0;  // effective weights after balancing
  double total = 0.0;
};

struct TotalLoss {
  Tensor total;
  LossBreakdown parts;
};

// L = cls + w_kl kl + w_vlca vlca + w_mse mse, where an auxiliary term larger
// than balance_ratio * cls has its weight halved. Throws NumericalError naming
// a non-finite term.
TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights, double balance_ratio = 10.0);

// Softmax probability of class 1 for each row of the logits.
std::vector<double> positive_probability(const Tensor& logits);

}  // namespace nhgcat
