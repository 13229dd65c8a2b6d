#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "nhgcat/params.hpp"
#include "nhgcat/tensor.hpp"

namespace nhgcat {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
  std::size_t kink_retries = 0;  // coordinates re-measured at a finer step
};

// f maps a leaf tensor (recorded on the supplied tape) to a scalar.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// max_i |analytic_i - central_i| / max(1, |central_i|) over every coordinate
// of x. A non-finite f value throws NumericalError naming the coordinate.
GradCheckResult grad_check(const ScalarFn& f, const Shape& shape, const std::vector<double>& x, double step = 1e-5);

// Model-scale variant: the loss is rebuilt from scratch for every evaluation.
using LossFn = std::function<Tensor(Tape&, Binder&)>;

struct ParamCheck {
  std::string name;
  GradCheckResult result;
};

// Checks up to `coords_per_param` coordinates of every parameter (all of them
// when the tensor is smaller), picked deterministically from `seed`. A
// coordinate whose error exceeds 1e-6 is re-measured at step / 100 and the
// smaller error kept, so a kink straddled by the step is not reported as a
// gradient error; such retries are counted.
std::vector<ParamCheck> check_param_gradients(const LossFn& loss, ParamStore& params, std::size_t coords_per_param,
                                              double step, std::uint64_t seed);

}  // namespace nhgcat
