#include "nhgcat/config.hpp"

#include <nlohmann/json.hpp>

#include "nhgcat/errors.hpp"

namespace nhgcat {

using nlohmann::json;

Experiment preset_experiment(std::string_view preset, std::size_t regions, std::size_t timepoints) {
  Experiment e;
  e.model = preset_model(preset, regions, timepoints);
  e.train = preset == "full" ? full_training() : desk_training();
  e.features = preset == "full" ? full_features() : desk_features();
  return e;
}

namespace {

// Reads or writes every field through one visitor so both directions stay in
// sync. The visitor receives (key path, reference).
template <typename E, typename F>
void visit(E& e, F&& f) {
  f("preset", e.model.preset);
  f("variant", e.model.variant);
  f("seed", e.seed);
  f("features.window", e.features.window);
  f("features.stride", e.features.stride);
  f("features.k", e.features.k);
  f("features.symmetrize", e.features.symmetrize);
  f("model.timepoints", e.model.rg.timepoints);
  f("model.static_width", e.model.rg.static_width);
  f("model.dim", e.model.rg.dim);
  f("model.heads", e.model.rg.heads);
  f("model.ve_hidden", e.model.rg.ve_hidden);
  f("model.ve_latent", e.model.rg.ve_latent);
  f("model.dropout", e.model.rg.dropout);
  f("model.feature_temperature", e.model.rg.feature_temperature);
  f("model.node_temperature", e.model.rg.node_temperature);
  f("model.hc.input_dim", e.model.hc.input_dim);
  f("model.hc.dim", e.model.hc.dim);
  f("model.hc.mix_hidden", e.model.hc.mix_hidden);
  f("model.hc.depth", e.model.hc.depth);
  f("model.hc.eps", e.model.hc.eps);
  f("model.hc.literal_tree", e.model.hc.literal_tree);
  f("model.vlca.input_dim", e.model.vlca.input_dim);
  f("model.vlca.attn_dim", e.model.vlca.attn_dim);
  f("model.vlca.latent", e.model.vlca.latent);
  f("model.vlca.hidden", e.model.vlca.hidden);
  f("model.vlca.beta", e.model.vlca.beta);
  f("model.vlca.prior", e.model.vlca.prior);
  f("model.vlca.noise", e.model.vlca.noise);
  f("model.cls_hidden1", e.model.cls_hidden1);
  f("model.cls_hidden2", e.model.cls_hidden2);
  f("model.cls_dropout", e.model.cls_dropout);
  f("train.lr", e.train.adam.lr);
  f("train.weight_decay", e.train.adam.weight_decay);
  f("train.decoupled_weight_decay", e.train.adam.decoupled);
  f("train.batch", e.train.batch);
  f("train.max_epochs", e.train.max_epochs);
  f("train.patience", e.train.patience);
  f("train.kl_max", e.train.kl_max);
  f("train.kl_warmup", e.train.kl_warmup);
  f("train.vlca_weight", e.train.vlca_weight);
  f("train.mse_start", e.train.mse_start);
  f("train.mse_end", e.train.mse_end);
  f("train.tau_start", e.train.tau_start);
  f("train.tau_end", e.train.tau_end);
  f("train.edge_dropout", e.train.edge_dropout);
  f("train.max_grad_norm", e.train.max_grad_norm);
  f("train.balance_ratio", e.train.balance_ratio);
  f("train.validation_fraction", e.train.validation_fraction);
}

json::json_pointer pointer(std::string_view key) {
  std::string p = "/";
  for (char c : key) p += c == '.' ? '/' : c;
  return json::json_pointer(p);
}

json encode(Variant v) { return std::string(variant_name(v)); }
json encode(PriorType p) { return std::string(prior_type_name(p)); }
json encode(NoiseMode n) { return n == NoiseMode::Shared ? "shared" : "independent"; }
template <typename T>
json encode(const T& v) {
  return v;
}

void decode(const json& j, Variant& v) { v = parse_variant(j.get<std::string>()); }
void decode(const json& j, PriorType& p) { p = parse_prior_type(j.get<std::string>()); }
void decode(const json& j, NoiseMode& n) {
  const auto s = j.get<std::string>();
  if (s == "shared") n = NoiseMode::Shared;
  else if (s == "independent") n = NoiseMode::Independent;
  else throw UsageError("unknown noise mode '" + s + "' (expected shared or independent)");
}
template <typename T>
void decode(const json& j, T& v) {
  v = j.get<T>();
}

// Leaf paths of a document, for rejecting unknown keys.
void leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  if (j.is_object() && j.empty() && !prefix.empty()) {
    out.push_back(prefix + ".");  // empty section, must name a known group
  } else if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.push_back(prefix);
  }
}

}  // namespace

std::string experiment_json(const Experiment& experiment) {
  json doc = json::object();
  visit(experiment, [&](std::string_view key, const auto& v) { doc[pointer(key)] = encode(v); });
  return doc.dump(2);
}

Experiment merge_experiment(const Experiment& base, std::string_view json_text, std::string_view source) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string(source) + ": " + e.what());
  }
  if (!doc.is_object()) throw UsageError(std::string(source) + ": expected a JSON object");
  std::vector<std::string> known;
  Experiment e = base;
  visit(e, [&](std::string_view key, auto& v) {
    known.emplace_back(key);
    const auto ptr = pointer(key);
    if (!doc.contains(ptr)) return;
    try {
      decode(doc.at(ptr), v);
    } catch (const json::exception& ex) {
      throw UsageError(std::string(source) + ": key '" + std::string(key) + "': " + ex.what());
    }
  });
  std::vector<std::string> present;
  leaves(doc, "", present);
  for (const auto& k : present)
    if (std::none_of(known.begin(), known.end(), [&](const std::string& kk) {
          return k.back() == '.' ? kk.starts_with(k) : kk == k;
        }))
      throw UsageError(std::string(source) + ": unknown key '" + k + "'");
  return e;
}

}  // namespace nhgcat
