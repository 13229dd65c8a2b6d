#include "nhgcat/optim.hpp"

#include <cmath>

#include "nhgcat/errors.hpp"

namespace nhgcat {

OptimizerState make_optimizer(const ParamStore& params, const AdamConfig& config) {
  OptimizerState s;
  s.config = config;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.value.size(), 0.0);
    s.second_moment.emplace_back(p.value.size(), 0.0);
  }
  return s;
}

double clip_global_norm(ParamStore& params, double max_norm) {
  const double norm = params.grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.grad) g *= f;
  }
  return norm;
}

StepReport optimizer_step(ParamStore& params, OptimizerState& state, double max_norm) {
  for (const auto& p : params)
    for (std::size_t i = 0; i < p.grad.size(); ++i)
      if (!std::isfinite(p.grad[i]))
        throw NumericalError("optimizer_step: non-finite gradient in '" + p.name + "' at index " + std::to_string(i));
  if (state.first_moment.size() != params.size()) throw UsageError("optimizer_step: state does not match parameters");

  StepReport report;
  report.grad_norm = clip_global_norm(params, max_norm);
  report.clipped = report.grad_norm > max_norm;
  report.clipped_norm = params.grad_norm();

  const AdamConfig& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  std::size_t k = 0;
  for (auto& p : params) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double g = p.grad[i];
      if (!c.decoupled) g += c.weight_decay * p.value[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double update = c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
      if (c.decoupled) p.value[i] -= c.lr * c.weight_decay * p.value[i];
      p.value[i] -= update;
    }
    ++k;
  }
  return report;
}

}  // namespace nhgcat
