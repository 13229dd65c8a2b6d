#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "nhgcat/layers.hpp"

namespace nhgcat {

enum class PriorType { Zero, InputMean };
enum class NoiseMode { Independent, Shared };

PriorType parse_prior_type(std::string_view s);
std::string_view prior_type_name(PriorType p);

struct VlcaConfig {
  std::size_t input_dim = 32;
  std::size_t attn_dim = 16;
  std::size_t latent = 8;
  std::size_t hidden = 16;
  double beta = 0.1;
  PriorType prior = PriorType::Zero;
  NoiseMode noise = NoiseMode::Independent;
};

struct Vlca {
  VlcaConfig config;
  Linear query, key, value;
  Linear enc_hidden, enc_mu, enc_log_var;  // shared by both branches
  Linear predict;                          // latent -> 2 logits
};

Vlca make_vlca(ParamStore& store, const VlcaConfig& config, std::uint64_t seed);

struct CircuitAttention {
  Tensor weights;   // 5 x 5, rows sum to one
  Tensor attended;  // 5 x attn_dim
  Tensor value;     // 5 x attn_dim
};

// softmax(Q K^T / sqrt(attn_dim)) V on one subject's circuit embeddings.
CircuitAttention circuit_attention(const Vlca& m, Binder& bind, const Tensor& circuits);

struct BranchLatent {
  Tensor input;  // flattened attended circuits, 1 x 5a
  Tensor mu, log_var, z;
};

struct CausalEffect {
  CircuitAttention attention;
  BranchLatent real;
  BranchLatent counterfactual;
  Tensor effect;  // 1 x 2
};

struct CausalOptions {
  bool deterministic = false;
  // Replaces the learned attention, e.g. with the identity for the null test.
  const Matrix* attention_override = nullptr;
};

CausalEffect causal_effect(const Vlca& m, Binder& bind, const Tensor& circuits, const Context& ctx,
                           const CausalOptions& options = {});

// Latent encoding + prediction of the factual branch only.
BranchLatent encode_branch(const Vlca& m, Binder& bind, const Tensor& attended, const Context& ctx,
                           std::string_view site, const std::vector<double>* shared_noise, bool deterministic);
Tensor predict_logits(const Vlca& m, Binder& bind, const Tensor& z);

// Scalar prior mean: 0, or the mean over the batch of the encoder inputs
// (treated as a constant).
double prior_mean(PriorType type, std::span<const Tensor> encoder_inputs);

// CE(effect logits, labels) + beta * KL(N(mu, sigma^2) || N(prior, I)), both
// averaged over the batch.
Tensor vlca_loss(const Tensor& effect_logits, std::span<const int> labels, const Tensor& mu, const Tensor& log_var,
                 double prior, double beta);

// Detached copy of the factual attention matrix.
Matrix attention_snapshot(const CausalEffect& e);

}  // namespace nhgcat
