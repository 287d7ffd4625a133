#pragma once

#include <functional>
#include <span>
#include <vector>

#include "cwpo/kernels.hpp"
#include "cwpo/losses.hpp"
#include "cwpo/optim.hpp"
#include "cwpo/policy.hpp"
#include "cwpo/prefdata.hpp"

namespace cwpo {

// Policy-side objective for a batch of annotated triplets: log-ratios are
// recomputed from `params` against cached reference log-probs, then reduced
// with confidence_weighted_loss. grad may be empty.
struct ReferenceLogprobs {
  std::vector<double> chosen;
  std::vector<double> rejected;
};

ReferenceLogprobs reference_logprobs(const ReferenceSnapshot& ref, std::span<const AnnotatedTriplet> data,
                                     Exec exec = Exec::parallel);

double policy_preference_loss(const PolicyNet& net, std::span<const double> params,
                              std::span<const AnnotatedTriplet> batch, std::span<const double> ref_chosen,
                              std::span<const double> ref_rejected, const LossConfig& cfg, std::span<double> grad,
                              Exec exec, std::vector<LogRatioExample>* ratios = nullptr);

struct AlignOptions {
  int epochs = 5;
  int batch_size = 16;
  std::uint64_t seed = 0;
  Exec exec = Exec::parallel;
  // Called after each epoch when set (evaluation probes).
  std::function<void(int epoch, const PolicyModel&)> probe;
};

// Mini-batch minimization of the confidence-weighted loss; the reference is
// never updated. Trace holds per-epoch mean loss and mean β-free margin
// lr_plus − lr_minus. A non-finite loss throws TrainingAborted carrying the
// last good parameters.
TrainTrace align_policy(PolicyModel& policy, const ReferenceSnapshot& reference,
                        std::span<const AnnotatedTriplet> data, const LossConfig& cfg, const OptimConfig& optim,
                        const AlignOptions& opts);

}  // namespace cwpo
