#include "nhgcat/vlca.hpp"

#include <cmath>
#include <string>

#include "nhgcat/errors.hpp"

namespace nhgcat {

PriorType parse_prior_type(std::string_view s) {
  if (s == "zero") return PriorType::Zero;
  if (s == "input-mean") return PriorType::InputMean;
  throw UsageError("unknown prior type '" + std::string(s) + "' (expected zero or input-mean)");
}

std::string_view prior_type_name(PriorType p) { return p == PriorType::Zero ? "zero" : "input-mean"; }

Vlca make_vlca(ParamStore& store, const VlcaConfig& c, std::uint64_t seed) {
  if (!(c.beta >= 0.0)) throw UsageError("vlca beta must be >= 0");
  Vlca m;
  m.config = c;
  m.query = make_linear(store, "vlca/query", c.input_dim, c.attn_dim, seed, false);
  m.key = make_linear(store, "vlca/key", c.input_dim, c.attn_dim, seed, false);
  m.value = make_linear(store, "vlca/value", c.input_dim, c.attn_dim, seed, false);
  const std::size_t flat = kCircuitCount * c.attn_dim;
  m.enc_hidden = make_linear(store, "vlca/encoder/hidden", flat, c.hidden, seed);
  m.enc_mu = make_linear(store, "vlca/encoder/mu", c.hidden, c.latent, seed);
  m.enc_log_var = make_linear(store, "vlca/encoder/log_var", c.hidden, c.latent, seed);
  m.predict = make_linear(store, "vlca/predict", c.latent, 2, seed);
  return m;
}

CircuitAttention circuit_attention(const Vlca& m, Binder& bind, const Tensor& circuits) {
  if (circuits.rows() != kCircuitCount)
    throw ShapeError("circuit_attention: expected 5 circuit rows, got " + to_string(circuits.shape()));
  CircuitAttention a;
  Tensor q = apply_linear(m.query, bind, circuits);
  Tensor k = apply_linear(m.key, bind, circuits);
  a.value = apply_linear(m.value, bind, circuits);
  const double s = 1.0 / std::sqrt(static_cast<double>(m.config.attn_dim));
  a.weights = softmax(scale(matmul(q, transpose(k)), s), 1);
  a.attended = matmul(a.weights, a.value);
  return a;
}

BranchLatent encode_branch(const Vlca& m, Binder& bind, const Tensor& attended, const Context& ctx,
                           std::string_view site, const std::vector<double>* shared_noise, bool deterministic) {
  BranchLatent b;
  b.input = reshape(attended, {1, attended.size()});
  Tensor h = leaky_relu(apply_linear(m.enc_hidden, bind, b.input));
  b.mu = apply_linear(m.enc_mu, bind, h);
  b.log_var = apply_linear(m.enc_log_var, bind, h);
  if (deterministic || !ctx.training) {
    b.z = b.mu;
  } else if (shared_noise) {
    b.z = reparam_with_noise(b.mu, b.log_var, *shared_noise);
  } else {
    RngStream s = *ctx.stream(site);
    b.z = sample_gaussian_reparam(b.mu, b.log_var, s);
  }
  return b;
}

Tensor predict_logits(const Vlca& m, Binder& bind, const Tensor& z) { return apply_linear(m.predict, bind, z); }

CausalEffect causal_effect(const Vlca& m, Binder& bind, const Tensor& circuits, const Context& ctx,
                           const CausalOptions& options) {
  CausalEffect e;
  e.attention = circuit_attention(m, bind, circuits);
  if (options.attention_override) {
    const Matrix& a = *options.attention_override;
    if (a.rows() != static_cast<Eigen::Index>(kCircuitCount) || a.cols() != a.rows())
      throw ShapeError("attention override must be 5 x 5");
    e.attention.weights = to_tensor(bind.tape(), a);
    e.attention.attended = matmul(e.attention.weights, e.attention.value);
  }
  std::vector<double> noise;
  const std::vector<double>* shared = nullptr;
  if (ctx.training && !options.deterministic && m.config.noise == NoiseMode::Shared) {
    RngStream s = *ctx.stream("vlca/shared");
    noise.resize(m.config.latent);
    for (auto& v : noise) v = s.normal();
    shared = &noise;
  }
  e.real = encode_branch(m, bind, e.attention.attended, ctx, "vlca/real", shared, options.deterministic);
  // Counterfactual: identity attention, so each circuit keeps its own value.
  e.counterfactual = encode_branch(m, bind, e.attention.value, ctx, "vlca/cf", shared, options.deterministic);
  e.effect = sub(predict_logits(m, bind, e.real.z), predict_logits(m, bind, e.counterfactual.z));
  return e;
}

double prior_mean(PriorType type, std::span<const Tensor> encoder_inputs) {
  if (type == PriorType::Zero || encoder_inputs.empty()) return 0.0;
  double s = 0.0;
  std::size_t count = 0;
  for (const auto& t : encoder_inputs) {
    for (double v : t.values()) s += v;
    count += t.size();
  }
  return s / static_cast<double>(count);
}

Tensor vlca_loss(const Tensor& effect_logits, std::span<const int> labels, const Tensor& mu, const Tensor& log_var,
                 double prior, double beta) {
  Tensor ce = cross_entropy_with_logits(effect_logits, labels);
  if (beta == 0.0) return ce;
  return add(ce, scale(gaussian_kl(mu, log_var, prior), beta));
}

Matrix attention_snapshot(const CausalEffect& e) {
  const auto& w = e.attention.weights;
  Matrix out(static_cast<Eigen::Index>(w.rows()), static_cast<Eigen::Index>(w.cols()));
  std::copy(w.values().begin(), w.values().end(), out.data());
  return out;
}

}  // namespace nhgcat
