#pragma once

#include <cstdint>
#include <vector>

#include "nhgcat/params.hpp"

namespace nhgcat {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  // false: L2 term added to the gradient (classic Adam); true: AdamW.
  bool decoupled = true;
};

struct OptimizerState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
};

OptimizerState make_optimizer(const ParamStore& params, const AdamConfig& config);

struct StepReport {
  double grad_norm = 0.0;     // before clipping
  double clipped_norm = 0.0;  // after clipping
  bool clipped = false;
};

// Rescales all grads so their global L2 norm is at most max_norm. Returns the
// norm before rescaling.
double clip_global_norm(ParamStore& params, double max_norm);

// Clip then Adam update. A non-finite gradient aborts the step with
// NumericalError before any parameter or moment is touched.
StepReport optimizer_step(ParamStore& params, OptimizerState& state, double max_norm);

}  // namespace nhgcat
