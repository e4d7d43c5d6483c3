#include "ktir/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ktir/errors.hpp"

namespace ktir {

void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads,
                OptimizerState& state, double lr) {
  if (grads.size() != params.size()) {
    throw ShapeMismatch("adamw_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeMismatch("adamw_step: optimizer state tracks " +
                        std::to_string(state.first_moment.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  if (!state.decay_mask.empty() && state.decay_mask.size() != params.size()) {
    throw ShapeMismatch("adamw_step: decay mask size mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel() ||
        (!grads[i].empty() && grads[i].size() != params[i].numel())) {
      throw ShapeMismatch("adamw_step: parameter " + std::to_string(i) + " changed size");
    }
  }

  const auto& cfg = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const bool decay = state.decay_mask.empty() || state.decay_mask[i];
    const double shrink = decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    const auto& g = grads[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      value[j] = value[j] * shrink - lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

void adamw_step(std::span<Tensor> params, OptimizerState& state, double lr) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    auto g = p.grad();
    grads.emplace_back(g.begin(), g.end());
  }
  adamw_step(params, grads, state, lr);
}

double cosine_lr(const LrSchedule& schedule, std::int64_t step) {
  if (schedule.total_steps <= 0) return schedule.base_lr;
  const auto s = std::clamp<std::int64_t>(step, 0, schedule.total_steps);
  const std::int64_t warmup = std::clamp<std::int64_t>(schedule.warmup_steps, 0, schedule.total_steps);
  if (s < warmup) {
    return schedule.base_lr * static_cast<double>(s + 1) / static_cast<double>(warmup);
  }
  const std::int64_t span = schedule.total_steps - warmup;
  if (span == 0) return schedule.min_lr;
  const double progress = static_cast<double>(s - warmup) / static_cast<double>(span);
  return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) *
                               (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ktir
