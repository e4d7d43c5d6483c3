#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ktir/tensor.hpp"

namespace ktir {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// First/second moment estimates, one entry per parameter in the order the
// parameters are passed to adamw_step(). Moments are allocated on the first
// step. decay_mask[i] == false exempts parameter i from weight decay; an
// empty mask decays everything.
struct OptimizerState {
  AdamWConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::vector<bool> decay_mask;
  std::int64_t step = 0;
};

// One decoupled-weight-decay Adam update using the gradients accumulated on
// each parameter. Parameters without a gradient are treated as having a
// zero gradient. Throws ShapeMismatch if the parameter list no longer
// matches the moment buffers.
void adamw_step(std::span<Tensor> params, OptimizerState& state, double lr);

// Same update with gradients supplied explicitly, grads[i] matching params[i].
void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads,
                OptimizerState& state, double lr);

struct LrSchedule {
  double base_lr = 1e-3;
  std::int64_t total_steps = 1;
  double min_lr = 0.0;
  // Linear ramp from base_lr / warmup_steps up to base_lr before the cosine
  // phase starts. Zero disables the ramp.
  std::int64_t warmup_steps = 0;
};

// Cosine annealing from base_lr at step 0 to min_lr at total_steps. Steps
// outside [0, total_steps] are clamped. With warmup, the cosine phase spans
// [warmup_steps, total_steps].
double cosine_lr(const LrSchedule& schedule, std::int64_t step);

}  // namespace ktir
