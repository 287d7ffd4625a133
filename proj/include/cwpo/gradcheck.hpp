#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cwpo/params.hpp"

namespace cwpo {

// A differentiable scalar objective. When `grad` is non-empty it has length
// params.size(), arrives zeroed, and receives ∂f/∂params.
using Objective = std::function<double(const ParamSet& params, std::span<double> grad)>;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<double> gradient;
};

// Evaluates f and its gradient; any non-finite output raises NonFiniteError
// naming the objective or the offending parameter array.
ValueAndGrad eval_with_grad(const Objective& f, const ParamSet& params);

struct GradReport {
  std::vector<double> analytic;
  std::vector<double> numeric;  // filled at probed coordinates only
  std::vector<std::size_t> probes;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

// Central differences on `probe_count` distinct coordinates drawn with
// `seed`; relative error uses max(|a|, |n|, 1e-8) as denominator.
GradReport finite_diff_check(const Objective& f, const ParamSet& params, std::size_t probe_count, double step,
                             std::uint64_t seed = 0);

}  // namespace cwpo
