#include "cwpo/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cwpo/errors.hpp"
#include "cwpo/rng.hpp"

namespace cwpo {

ValueAndGrad eval_with_grad(const Objective& f, const ParamSet& params) {
  ValueAndGrad out;
  out.gradient.assign(params.size(), 0.0);
  out.value = check_finite(f(params, out.gradient), "objective");
  for (std::size_t i = 0; i < out.gradient.size(); ++i) {
    if (!std::isfinite(out.gradient[i])) {
      throw NonFiniteError("gradient of " + params.name_at(i), "entry " + std::to_string(i) + " is not finite");
    }
  }
  return out;
}

GradReport finite_diff_check(const Objective& f, const ParamSet& params, std::size_t probe_count, double step,
                             std::uint64_t seed) {
  if (!(step > 0.0)) {
    throw ArgumentError("finite-difference step must be positive");
  }
  if (probe_count > params.size()) {
    throw ArgumentError("probe_count exceeds parameter count");
  }
  GradReport report;
  report.analytic = eval_with_grad(f, params).gradient;
  report.numeric.assign(params.size(), 0.0);

  std::vector<std::size_t> all(params.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0xfd));
  // Partial Fisher-Yates: the first probe_count entries are a uniform sample.
  for (std::size_t i = 0; i < probe_count; ++i) {
    std::size_t j = i + rng.below(all.size() - i);
    std::swap(all[i], all[j]);
  }
  report.probes.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(probe_count));
  std::sort(report.probes.begin(), report.probes.end());

  ParamSet work = params;
  for (std::size_t idx : report.probes) {
    double saved = work.flat()[idx];
    work.flat()[idx] = saved + step;
    double up = check_finite(f(work, {}), "objective(+h)");
    work.flat()[idx] = saved - step;
    double down = check_finite(f(work, {}), "objective(-h)");
    work.flat()[idx] = saved;
    double num = (up - down) / (2.0 * step);
    report.numeric[idx] = num;
    double a = report.analytic[idx];
    double denom = std::max({std::abs(a), std::abs(num), 1e-8});
    double rel = std::abs(a - num) / denom;
    if (idx == report.probes.front() || rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = idx;
    }
  }
  return report;
}

}  // namespace cwpo
