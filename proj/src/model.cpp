#include "nhgcat/model.hpp"

#include <cmath>

#include "nhgcat/errors.hpp"

namespace nhgcat {

Variant parse_variant(std::string_view s) {
  if (s == "full") return Variant::Full;
  if (s == "standard-attention") return Variant::StandardAttention;
  if (s == "deterministic-causal") return Variant::DeterministicCausal;
  if (s == "variational-no-causal") return Variant::VariationalNoCausal;
  throw UsageError("unknown variant '" + std::string(s) +
                   "' (expected full, standard-attention, deterministic-causal or variational-no-causal)");
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::StandardAttention: return "standard-attention";
    case Variant::DeterministicCausal: return "deterministic-causal";
    case Variant::VariationalNoCausal: return "variational-no-causal";
  }
  return "full";
}

namespace {

ModelConfig sized(std::string preset, std::size_t regions, std::size_t timepoints, std::size_t d, std::size_t ve_hidden,
                  std::size_t ve_latent, std::size_t attn, std::size_t vlca_latent) {
  ModelConfig c;
  c.preset = std::move(preset);
  c.rg.timepoints = timepoints;
  c.rg.static_width = static_width(regions);
  c.rg.dim = d;
  c.rg.ve_hidden = ve_hidden;
  c.rg.ve_latent = ve_latent;
  c.hc.input_dim = ve_latent;
  c.hc.dim = d;
  c.hc.mix_hidden = ve_hidden;
  c.vlca.input_dim = d;
  c.vlca.attn_dim = attn;
  c.vlca.hidden = attn;
  c.vlca.latent = vlca_latent;
  return c;
}

}  // namespace

ModelConfig desk_model(std::size_t regions, std::size_t timepoints) {
  return sized("desk", regions, timepoints, 32, 16, 8, 16, 8);
}

ModelConfig full_model(std::size_t regions, std::size_t timepoints) {
  return sized("full", regions, timepoints, 128, 32, 16, 64, 32);
}

ModelConfig preset_model(std::string_view preset, std::size_t regions, std::size_t timepoints) {
  if (preset == "desk") return desk_model(regions, timepoints);
  if (preset == "full") return full_model(regions, timepoints);
  throw UsageError("unknown preset '" + std::string(preset) + "' (expected desk or full)");
}

Model make_model(const ModelConfig& config, const CircuitAtlas& atlas, std::uint64_t seed) {
  Model m;
  m.config = config;
  m.atlas = atlas;
  m.rg = make_rg_fusion(m.params, config.rg, seed);
  m.hc = make_hc_pooling(m.params, config.hc, seed);
  m.vlca = make_vlca(m.params, config.vlca, seed);
  const std::size_t in = kCircuitCount * (config.variant == Variant::StandardAttention ? config.vlca.attn_dim
                                                                                       : config.hc.dim);
  m.cls1 = make_linear(m.params, "cls/hidden1", in, config.cls_hidden1, seed);
  m.cls2 = make_linear(m.params, "cls/hidden2", config.cls_hidden1, config.cls_hidden2, seed);
  m.cls3 = make_linear(m.params, "cls/out", config.cls_hidden2, 2, seed);
  return m;
}

namespace {

Tensor classify(const Model& m, Binder& bind, const Tensor& circuits, const Context& ctx) {
  const double p = m.config.cls_dropout;
  Tensor x = reshape(circuits, {1, circuits.size()});
  Tensor h = ctx.dropout(leaky_relu(apply_linear(m.cls1, bind, x)), p, "cls/hidden1");
  h = ctx.dropout(leaky_relu(apply_linear(m.cls2, bind, h)), p, "cls/hidden2");
  return apply_linear(m.cls3, bind, h);
}

Matrix to_matrix(const Tensor& t) {
  Matrix out(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  std::copy(t.values().begin(), t.values().end(), out.data());
  return out;
}

}  // namespace

BatchForward forward_batch(const Model& model, Binder& bind, std::span<const BatchItem> batch,
                           const GroupTemplates& templates, const ForwardOptions& options) {
  if (batch.empty()) throw UsageError("forward_batch: empty batch");
  const Variant variant = model.config.variant;
  std::vector<Tensor> logits, kls, priors, effects, mus, log_vars, encoder_inputs;
  std::vector<int> labels;
  BatchForward out;
  for (const BatchItem& item : batch) {
    const SubjectFeatures& s = *item.subject;
    RngStream stream(options.seed, options.stream + "/" + s.id);
    Context ctx{options.training, &stream};

    NodeEmbeddings e = rg_fusion_forward(model.rg, bind, s, *item.graph, ctx);
    PoolingResult pooled = pool_circuits(model.hc, bind, e.z_ve, model.atlas, templates, s.fc,
                                         options.use_labels ? s.label : -1, options.tau, ctx);
    kls.push_back(e.kl);
    if (pooled.prior_loss.valid()) priors.push_back(pooled.prior_loss);
    labels.push_back(s.label);

    CausalOptions copt;
    copt.deterministic = variant == Variant::DeterministicCausal;
    copt.attention_override = options.attention_override;
    CausalEffect effect;
    if (variant == Variant::VariationalNoCausal) {
      effect.attention = circuit_attention(model.vlca, bind, pooled.embeddings);
      effect.real = encode_branch(model.vlca, bind, effect.attention.attended, ctx, "vlca/real", nullptr, false);
      effect.effect = predict_logits(model.vlca, bind, effect.real.z);
    } else {
      effect = causal_effect(model.vlca, bind, pooled.embeddings, ctx, copt);
    }
    effects.push_back(effect.effect);
    mus.push_back(effect.real.mu);
    log_vars.push_back(effect.real.log_var);
    encoder_inputs.push_back(effect.real.input);

    const Tensor& cls_input = variant == Variant::StandardAttention ? effect.attention.attended : pooled.embeddings;
    logits.push_back(classify(model, bind, cls_input, ctx));

    if (options.keep_traces) {
      SubjectTrace t;
      t.id = s.id;
      t.attention = attention_snapshot(effect);
      for (std::size_t c = 0; c < kCircuitCount; ++c) {
        t.masks[c] = to_matrix(pooled.trace[c].masks);
        for (std::size_t k = 0; k < 3; ++k) t.mix[c][k] = pooled.trace[c].mix_weights.values()[k];
      }
      t.effect = {effect.effect.values()[0], effect.effect.values()[1]};
      out.traces.push_back(std::move(t));
    }
  }
  out.logits = concat(logits, 0);
  if (!options.use_labels) return out;

  out.terms.cls = cross_entropy_with_logits(out.logits, labels);
  out.terms.kl = mean(concat(kls, 0));
  if (!priors.empty()) out.terms.mse = mean(concat(priors, 0));
  const double beta = model.config.vlca.beta;
  Tensor effect_logits = concat(effects, 0);
  switch (variant) {
    case Variant::StandardAttention:
      break;
    case Variant::DeterministicCausal:
      out.terms.vlca = cross_entropy_with_logits(effect_logits, labels);
      break;
    case Variant::Full:
    case Variant::VariationalNoCausal: {
      const double prior = prior_mean(model.config.vlca.prior, encoder_inputs);
      out.terms.vlca = vlca_loss(effect_logits, labels, concat(mus, 0), concat(log_vars, 0), prior, beta);
      break;
    }
  }
  return out;
}

TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights, double balance_ratio) {
  if (!terms.cls.valid()) throw UsageError("total_loss: classification term missing");
  TotalLoss r;
  auto value = [](const Tensor& t, const char* name) {
    if (!t.valid()) return 0.0;
    const double v = t.item();
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite loss term '") + name + "'");
    return v;
  };
  r.parts.cls = value(terms.cls, "cls");
  r.parts.kl = value(terms.kl, "kl");
  r.parts.vlca = value(terms.vlca, "vlca");
  r.parts.mse = value(terms.mse, "mse");
  auto effective = [&](double w, double term) { return term > balance_ratio * r.parts.cls ? 0.5 * w : w; };
  r.parts.w_kl = effective(weights.kl, r.parts.kl);
  r.parts.w_vlca = effective(weights.vlca, r.parts.vlca);
  r.parts.w_mse = effective(weights.mse, r.parts.mse);

  Tensor total = terms.cls;
  auto accumulate = [&](const Tensor& t, double w) {
    if (t.valid() && w != 0.0) total = add(total, scale(t, w));
  };
  accumulate(terms.kl, r.parts.w_kl);
  accumulate(terms.vlca, r.parts.w_vlca);
  accumulate(terms.mse, r.parts.w_mse);
  r.total = total;
  r.parts.total = total.item();
  return r;
}

std::vector<double> positive_probability(const Tensor& logits) {
  std::vector<double> p;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const double a = logits.at(r, 0), b = logits.at(r, 1);
    p.push_back(1.0 / (1.0 + std::exp(a - b)));
  }
  return p;
}

}  // namespace nhgcat
