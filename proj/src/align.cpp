#include "cwpo/align.hpp"

#include <cmath>

#include "cwpo/errors.hpp"

namespace cwpo {

ReferenceLogprobs reference_logprobs(const ReferenceSnapshot& ref, std::span<const AnnotatedTriplet> data,
                                     Exec exec) {
  ReferenceLogprobs out{std::vector<double>(data.size()), std::vector<double>(data.size())};
  for_indices(
      data.size(),
      [&](std::size_t i) {
        out.chosen[i] = sequence_logprob(ref, data[i].prompt(), data[i].chosen());
        out.rejected[i] = sequence_logprob(ref, data[i].prompt(), data[i].rejected());
      },
      exec);
  return out;
}

double policy_preference_loss(const PolicyNet& net, std::span<const double> params,
                              std::span<const AnnotatedTriplet> batch, std::span<const double> ref_chosen,
                              std::span<const double> ref_rejected, const LossConfig& cfg, std::span<double> grad,
                              Exec exec, std::vector<LogRatioExample>* ratios) {
  const std::size_t n = batch.size();
  std::vector<PolicyTape> chosen_tapes(n), rejected_tapes(n);
  std::vector<LogRatioExample> examples(n);
  const bool want_grad = !grad.empty();
  for_indices(
      n,
      [&](std::size_t i) {
        const auto& a = batch[i];
        double lp = policy_logprob(net, params, a.prompt(), a.chosen(), want_grad ? &chosen_tapes[i] : nullptr);
        double lm = policy_logprob(net, params, a.prompt(), a.rejected(), want_grad ? &rejected_tapes[i] : nullptr);
        examples[i] = {lp - ref_chosen[i], lm - ref_rejected[i], a.confidence};
      },
      exec);
  std::vector<double> d_plus(want_grad ? n : 0), d_minus(want_grad ? n : 0);
  const double value = confidence_weighted_loss(examples, cfg, d_plus, d_minus);
  if (want_grad) {
    batch_value_and_grad(
        n,
        [&](std::size_t i, std::span<double> g) {
          if (d_plus[i] != 0.0) {
            policy_logprob_backward(net, params, chosen_tapes[i], d_plus[i], g);
          }
          if (d_minus[i] != 0.0) {
            policy_logprob_backward(net, params, rejected_tapes[i], d_minus[i], g);
          }
          return 0.0;
        },
        grad, exec);
  }
  if (ratios) {
    *ratios = std::move(examples);
  }
  return value;
}

TrainTrace align_policy(PolicyModel& policy, const ReferenceSnapshot& reference,
                        std::span<const AnnotatedTriplet> data, const LossConfig& cfg, const OptimConfig& optim,
                        const AlignOptions& opts) {
  TrainTrace trace;
  if (opts.epochs <= 0) {
    return trace;
  }
  if (data.empty()) {
    throw ArgumentError("align_policy requires a non-empty dataset");
  }
  cfg.validate();
  const OptimConfig sched = fit_schedule(optim, opts.epochs, data.size(), opts.batch_size);
  sched.validate();
  const ReferenceLogprobs ref = reference_logprobs(reference, data, opts.exec);

  AdamState state = AdamState::zeros(policy.params().size());
  std::vector<double> grad(policy.params().size());
  std::vector<AnnotatedTriplet> batch;
  std::vector<double> rc, rr;
  std::vector<LogRatioExample> ratios;
  ParamSet last_good = policy.params();
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    auto batches = epoch_batches(data.size(), opts.batch_size, opts.seed, epoch);
    double loss_sum = 0.0;
    double margin_sum = 0.0;
    std::size_t margin_count = 0;
    for (const auto& idx : batches) {
      batch.clear();
      rc.clear();
      rr.clear();
      for (std::size_t i : idx) {
        batch.push_back(data[i]);
        rc.push_back(ref.chosen[i]);
        rr.push_back(ref.rejected[i]);
      }
      try {
        double loss =
            policy_preference_loss(policy.net(), policy.params().flat(), batch, rc, rr, cfg, grad, opts.exec, &ratios);
        check_finite(loss, "align_loss");
        last_good = policy.params();
        optimizer_step(policy.params(), grad, state, trace.steps + 1, sched);
        ++trace.steps;
        loss_sum += loss;
        for (const auto& r : ratios) {
          margin_sum += r.lr_plus - r.lr_minus;
        }
        margin_count += ratios.size();
      } catch (const NonFiniteError& e) {
        throw TrainingAborted(e.node(), trace, last_good);
      }
    }
    trace.epochs.push_back({epoch, loss_sum / static_cast<double>(batches.size()), std::nullopt,
                            margin_sum / static_cast<double>(margin_count)});
    if (opts.probe) {
      opts.probe(epoch, policy);
    }
  }
  return trace;
}

}  // namespace cwpo
