#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cwpo/checkpoint.hpp"
#include "cwpo/confidence.hpp"
#include "cwpo/kernels.hpp"
#include "cwpo/network.hpp"
#include "cwpo/optim.hpp"
#include "cwpo/policy.hpp"
#include "cwpo/prefdata.hpp"

namespace cwpo {

// Backbone with a scalar head read at the final encoded position.
struct ScoringNet {
  ArchConfig arch;
  BackboneLayout backbone;
  std::size_t head_w = 0;  // [embed_dim]
  std::size_t head_b = 0;  // [1]
};

struct ScoringTape {
  BackboneTape backbone;
  double score = 0.0;
};

double scoring_forward(const ScoringNet& net, std::span<const double> params, std::span<const int> encoded,
                       ScoringTape* tape = nullptr);
// Accumulates scale · ∇θ score into grad.
void scoring_backward(const ScoringNet& net, std::span<const double> params, const ScoringTape& tape, double scale,
                      std::span<double> grad);

class ScoringModel {
 public:
  static ScoringModel create(const ArchConfig& arch, std::uint64_t seed);
  static ScoringModel from_params(const ArchConfig& arch, ParamSet params);

  const ArchConfig& arch() const { return net_.arch; }
  const ScoringNet& net() const { return net_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

 private:
  ScoringNet net_;
  ParamSet params_;
};

// π_w(x, y): scores (prompt, SEP, response) independently per response.
struct WeakAnnotator {
  ScoringModel model;
  static WeakAnnotator create(const ArchConfig& arch, std::uint64_t seed) {
    return {ScoringModel::create(arch, seed)};
  }
};

// f_w(x, y₁, y₂): jointly encodes both candidates; no antisymmetry assumed.
struct PairwiseAnnotator {
  ScoringModel model;
  static PairwiseAnnotator create(const ArchConfig& arch, std::uint64_t seed) {
    return {ScoringModel::create(arch, seed)};
  }
};

// Copies every backbone array of a policy into a scoring model (head untouched).
void transfer_backbone(const PolicyModel& source, ScoringModel& target);

double score(const WeakAnnotator& annotator, const Prompt& x, const Response& y);
double pairwise_logit(const PairwiseAnnotator& annotator, const Prompt& x, const Response& y1, const Response& y2);

struct PairLoss {
  double value = 0.0;
  double d_first = 0.0;   // ∂/∂ first argument
  double d_second = 0.0;  // ∂/∂ second argument
};

// −log σ(s⁺ − s⁻)
PairLoss bt_example_loss(double s_plus, double s_minus);
// −[log σ(f(x,y⁺,y⁻)) + log(1 − σ(f(x,y⁻,y⁺)))]; the two order terms are summed.
PairLoss pairwise_example_loss(double f_plus_minus, double f_minus_plus);

// Mean losses over labeled triplets at the given parameters; grad may be empty.
double bt_batch_loss(const ScoringNet& net, std::span<const double> params,
                     std::span<const PreferenceTriplet> labeled, std::span<double> grad, Exec exec);
double pairwise_batch_loss(const ScoringNet& net, std::span<const double> params,
                           std::span<const PreferenceTriplet> labeled, std::span<double> grad, Exec exec);

// Trace records the mean batch loss per epoch and, when `heldout` is given,
// agreement of the annotator's choice with its labels.
TrainTrace train_weak_bt(WeakAnnotator& annotator, std::span<const PreferenceTriplet> labeled,
                         const OptimConfig& cfg, const TrainOptions& opts,
                         std::span<const PreferenceTriplet> heldout = {});
TrainTrace train_weak_pairwise(PairwiseAnnotator& annotator, std::span<const PreferenceTriplet> labeled,
                               const OptimConfig& cfg, const TrainOptions& opts,
                               std::span<const PreferenceTriplet> heldout = {});

// chosen = the higher score; exact ties go to response_a.
AnnotatedTriplet annotate_from_scores(const Triplet& t, double score_a, double score_b,
                                      const ConfidenceScheme& scheme);
AnnotatedTriplet annotate(const WeakAnnotator& annotator, const Triplet& t, const ConfidenceScheme& scheme);
std::vector<AnnotatedTriplet> annotate_all(const WeakAnnotator& annotator, std::span<const Triplet> data,
                                           const ConfidenceScheme& scheme, Exec exec = Exec::parallel);

// Margin s = f(x,a,b) − f(x,b,a) picks the chosen side (ties → a); confidence is
// the pairwise scheme applied to f(x,y⁺,y⁻). Stored scores are the two
// order logits, so score_chosen ≥ score_rejected.
AnnotatedTriplet pairwise_annotate(const PairwiseAnnotator& annotator, const Triplet& t);
std::vector<AnnotatedTriplet> pairwise_annotate_all(const PairwiseAnnotator& annotator, std::span<const Triplet> data,
                                                    Exec exec = Exec::parallel);

// β · (log π_w(y|x) − log π_w^SFT(y|x))
double implicit_reward(const PolicyModel& weak_policy, const ReferenceSnapshot& weak_sft_ref, const Prompt& x,
                       const Response& y, double beta);
std::vector<AnnotatedTriplet> implicit_annotate_all(const PolicyModel& weak_policy,
                                                    const ReferenceSnapshot& weak_sft_ref,
                                                    std::span<const Triplet> data, double beta,
                                                    const ConfidenceScheme& scheme, Exec exec = Exec::parallel);

// Fraction of labeled items whose label matches `chosen_side`.
double label_agreement(std::span<const AnnotatedTriplet> annotated, std::span<const PreferenceTriplet> labeled);

// Checkpoints carry "kind":"annotator" and "annotator_kind" ∈ {bt, pairwise, implicit}.
Checkpoint annotator_checkpoint(const WeakAnnotator& a, std::uint64_t seed, std::int64_t step);
Checkpoint annotator_checkpoint(const PairwiseAnnotator& a, std::uint64_t seed, std::int64_t step);
// Implicit annotators store the weak policy under "policy." and its SFT
// snapshot under "reference."; β goes in the metadata.
Checkpoint annotator_checkpoint(const PolicyModel& weak_policy, const ReferenceSnapshot& weak_sft, double beta,
                                std::uint64_t seed, std::int64_t step);

std::string annotator_kind(const Checkpoint& ckpt);
WeakAnnotator bt_annotator_from_checkpoint(const Checkpoint& ckpt);
PairwiseAnnotator pairwise_annotator_from_checkpoint(const Checkpoint& ckpt);
struct ImplicitAnnotator {
  PolicyModel weak_policy;
  ReferenceSnapshot weak_sft;
  double beta;
};
ImplicitAnnotator implicit_annotator_from_checkpoint(const Checkpoint& ckpt);

}  // namespace cwpo
