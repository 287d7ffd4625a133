#include "cwpo/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "cwpo/errors.hpp"

namespace cwpo {

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) {
    throw ArgumentError("learning_rate must be positive");
  }
  if (!(weight_decay >= 0.0)) {
    throw ArgumentError("weight_decay must be non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ArgumentError("betas must lie in [0,1)");
  }
  if (!(epsilon > 0.0)) {
    throw ArgumentError("epsilon must be positive");
  }
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ArgumentError("warmup_steps must lie in [0, total_steps]");
  }
}

Schedule parse_schedule(std::string_view s) {
  if (s == "constant") {
    return Schedule::constant;
  }
  if (s == "cosine") {
    return Schedule::cosine;
  }
  throw ArgumentError("unknown schedule \"" + std::string(s) + "\"");
}

std::string_view to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

double lr_schedule(int step_index, const OptimConfig& cfg) {
  const double peak = cfg.learning_rate;
  if (step_index < cfg.warmup_steps) {
    return peak * static_cast<double>(step_index) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == Schedule::constant) {
    return peak;
  }
  if (step_index >= cfg.total_steps) {
    return step_index == cfg.warmup_steps ? peak : 0.0;
  }
  double progress = static_cast<double>(step_index - cfg.warmup_steps) /
                    static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void optimizer_step(ParamSet& params, std::span<const double> grad, AdamState& state, int step_index,
                    const OptimConfig& cfg) {
  const std::size_t n = params.size();
  if (grad.size() != n || state.m.size() != n || state.v.size() != n) {
    throw ArgumentError("optimizer_step: gradient/state length does not match parameter count");
  }
  if (step_index < 1) {
    throw ArgumentError("optimizer_step: step_index is 1-based");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grad[i])) {
      throw NonFiniteError("optimizer_step", "gradient entry " + std::to_string(i) + " (" + params.name_at(i) +
                                                 ") is not finite; step refused");
    }
  }
  const double lr = lr_schedule(step_index, cfg);
  const double bc1 = 1.0 - std::pow(cfg.beta1, step_index);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step_index);
  const double decay = 1.0 - lr * cfg.weight_decay;
  auto theta = params.flat();
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    double m_hat = state.m[i] / bc1;
    double v_hat = state.v[i] / bc2;
    theta[i] = theta[i] * decay - lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
}

}  // namespace cwpo
