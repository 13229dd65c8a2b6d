#include "nhgcat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nhgcat/errors.hpp"
#include "nhgcat/rng.hpp"

namespace nhgcat {
namespace {

constexpr double kKinkRetryAbove = 1e-6;
constexpr double kKinkStepFactor = 1e-2;

double relative_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric));
}

void accumulate(GradCheckResult& r, std::size_t index, double analytic, double numeric) {
  const double err = relative_error(analytic, numeric);
  if (r.coordinates == 0 || err > r.max_rel_error) {
    r.max_rel_error = err;
    r.worst_index = index;
    r.analytic = analytic;
    r.numeric = numeric;
  }
  ++r.coordinates;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const Shape& shape, const std::vector<double>& x, double step) {
  if (numel(shape) != x.size()) throw ShapeError("grad_check: shape does not match point");
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor leaf = tape.variable(shape, x);
    Tensor y = f(tape, leaf);
    if (!std::isfinite(y.item())) throw NumericalError("grad_check: f is non-finite at the base point");
    tape.backward(y);
    analytic.assign(leaf.grad().begin(), leaf.grad().end());
  }
  auto eval = [&](const std::vector<double>& p, std::size_t i) {
    Tape tape;
    const double v = f(tape, tape.constant(shape, p)).item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: f is non-finite at coordinate " + std::to_string(i));
    return v;
  };
  GradCheckResult r;
  std::vector<double> p = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = x[i] + step;
    const double fp = eval(p, i);
    p[i] = x[i] - step;
    const double fm = eval(p, i);
    p[i] = x[i];
    accumulate(r, i, analytic[i], (fp - fm) / (2.0 * step));
  }
  return r;
}

std::vector<ParamCheck> check_param_gradients(const LossFn& loss, ParamStore& params, std::size_t coords_per_param,
                                              double step, std::uint64_t seed) {
  params.zero_grad();
  {
    Tape tape;
    Binder bind(tape, params);
    Tensor y = loss(tape, bind);
    if (!std::isfinite(y.item())) throw NumericalError("gradcheck: loss is non-finite at the base point");
    tape.backward(y);
    bind.accumulate_grads(params);
  }
  auto eval = [&](const std::string& name, std::size_t i) {
    Tape tape;
    Binder bind(tape, params);
    const double v = loss(tape, bind).item();
    if (!std::isfinite(v))
      throw NumericalError("gradcheck: loss non-finite when perturbing " + name + "[" + std::to_string(i) + "]");
    return v;
  };
  std::vector<ParamCheck> out;
  for (ParamId id = 0; id < params.size(); ++id) {
    Parameter& p = params[id];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > coords_per_param) {
      RngStream rng(seed, "gradcheck/" + p.name);
      for (std::size_t i = 0; i < coords_per_param; ++i) std::swap(coords[i], coords[i + rng.index(coords.size() - i)]);
      coords.resize(coords_per_param);
    }
    ParamCheck check{p.name, {}};
    auto central = [&](std::size_t i, double h) {
      const double orig = p.value[i];
      params[id].value[i] = orig + h;
      const double fp = eval(p.name, i);
      params[id].value[i] = orig - h;
      const double fm = eval(p.name, i);
      params[id].value[i] = orig;
      return (fp - fm) / (2.0 * h);
    };
    for (std::size_t i : coords) {
      double numeric = central(i, step);
      // A leaky-relu kink inside [x - h, x + h] biases the central difference
      // by the slope jump whatever h is, while a wrong gradient stays wrong at
      // any step. Retry at a step far inside the kink distance.
      if (relative_error(p.grad[i], numeric) > kKinkRetryAbove) {
        const double fine = central(i, step * kKinkStepFactor);
        if (relative_error(p.grad[i], fine) < relative_error(p.grad[i], numeric)) {
          numeric = fine;
          ++check.result.kink_retries;
        }
      }
      accumulate(check.result, i, p.grad[i], numeric);
    }
    out.push_back(std::move(check));
  }
  return out;
}

}  // namespace nhgcat
