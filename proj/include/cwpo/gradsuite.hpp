#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cwpo/gradcheck.hpp"
#include "cwpo/params.hpp"

namespace cwpo {

// Objectives that the grad-check command can verify:
//   dpo ipo rdpo             unit-weighted policy losses
//   cw_dpo cw_ipo cw_rdpo    confidence-weighted policy losses
//   bt pairwise              annotator losses
//   sft                      token-mean supervised loss
// Each is built on a tiny random model and a random batch drawn from `seed`.
struct GradObjective {
  ParamSet params;
  Objective objective;
};

struct GradCheckSettings {
  std::string loss = "cw_dpo";
  double beta = 0.5;
  double epsilon = 0.1;
  int batch = 8;
  std::size_t probes = 32;
  int seeds = 5;
  double step = 1e-4;
  std::uint64_t seed = 0;
};

const std::vector<std::string>& grad_check_losses();
GradObjective make_grad_objective(const GradCheckSettings& s, std::uint64_t seed);

struct GradSuiteReport {
  double max_rel_err = 0.0;
  std::vector<double> per_seed;
  std::size_t probes_total = 0;
};

// finite_diff_check over `seeds` independent objectives.
GradSuiteReport run_grad_check(const GradCheckSettings& s);

}  // namespace cwpo
