#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "cwpo/params.hpp"

namespace cwpo {

enum class Schedule { constant, cosine };

struct OptimConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  int warmup_steps = 0;
  int total_steps = 1;
  Schedule schedule = Schedule::constant;

  void validate() const;
};

Schedule parse_schedule(std::string_view s);
std::string_view to_string(Schedule s);

// Linear warmup 0 → peak over warmup_steps, then either constant peak or a
// cosine decay reaching exactly 0 at total_steps (and staying there).
double lr_schedule(int step_index, const OptimConfig& cfg);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;

  static AdamState zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }
};

// One AdamW step. `step_index` is the 1-based update count; it drives both the
// schedule and bias correction. Weight decay is decoupled:
// θ ← θ·(1 − lr·wd) before the Adam delta. A non-finite gradient is refused.
void optimizer_step(ParamSet& params, std::span<const double> grad, AdamState& state, int step_index,
                    const OptimConfig& cfg);

}  // namespace cwpo
