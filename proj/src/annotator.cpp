#include "cwpo/annotator.hpp"

#include <cmath>
#include <string>

#include "cwpo/errors.hpp"
#include "cwpo/numerics.hpp"

namespace cwpo {
namespace {

ScoringNet declare_scoring(ParamSet& params, const ArchConfig& arch) {
  ScoringNet net;
  net.arch = arch;
  net.backbone = declare_backbone(params, arch);
  net.head_w = params.add("score_head.w", {static_cast<std::size_t>(arch.embed_dim)});
  net.head_b = params.add("score_head.b", {1});
  return net;
}

Tokens encode_pairwise(const ArchConfig& arch, const Prompt& x, const Response& y1, const Response& y2) {
  return encode_pair(arch, x, y1, y2);
}

const Response& preferred(const PreferenceTriplet& t) {
  if (!t.human_label) {
    throw ArgumentError("weak-annotator training requires labeled triplets");
  }
  return t.response(*t.human_label);
}

const Response& dispreferred(const PreferenceTriplet& t) { return t.response(other(*t.human_label)); }

// Shared mini-batch loop for both annotator families.
template <class BatchLoss, class Agreement>
TrainTrace train_scoring(ScoringModel& model, std::span<const PreferenceTriplet> labeled, const OptimConfig& cfg,
                         const TrainOptions& opts, BatchLoss&& batch_loss, Agreement&& agreement,
                         const char* node) {
  TrainTrace trace;
  if (opts.epochs <= 0) {
    return trace;
  }
  if (labeled.empty()) {
    throw ArgumentError("annotator training requires at least one labeled triplet");
  }
  for (const auto& t : labeled) {
    (void)preferred(t);
  }
  const OptimConfig sched = fit_schedule(cfg, opts.epochs, labeled.size(), opts.batch_size);
  sched.validate();
  AdamState state = AdamState::zeros(model.params().size());
  std::vector<double> grad(model.params().size());
  std::vector<PreferenceTriplet> batch;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    auto batches = epoch_batches(labeled.size(), opts.batch_size, opts.seed, epoch);
    double loss_sum = 0.0;
    for (const auto& idx : batches) {
      batch.clear();
      for (std::size_t i : idx) {
        batch.push_back(labeled[i]);
      }
      try {
        double loss = batch_loss(model.net(), model.params().flat(), batch, grad, opts.exec);
        check_finite(loss, node);
        optimizer_step(model.params(), grad, state, trace.steps + 1, sched);
        ++trace.steps;
        loss_sum += loss;
      } catch (const NonFiniteError& e) {
        throw TrainingAborted(e.node(), trace, model.params());
      }
    }
    EpochStat stat{epoch, loss_sum / static_cast<double>(batches.size()), std::nullopt, std::nullopt};
    stat.heldout_agreement = agreement();
    trace.epochs.push_back(stat);
  }
  return trace;
}

}  // namespace

double scoring_forward(const ScoringNet& net, std::span<const double> params, std::span<const int> encoded,
                       ScoringTape* tape) {
  ScoringTape local;
  ScoringTape& t = tape ? *tape : local;
  backbone_forward(net.arch, net.backbone, params, encoded, t.backbone);
  const int d = net.arch.embed_dim;
  const double* h = t.backbone.out.data() + static_cast<std::size_t>((t.backbone.length - 1) * d);
  double s = params[net.head_b];
  for (int j = 0; j < d; ++j) {
    s += params[net.head_w + static_cast<std::size_t>(j)] * h[j];
  }
  t.score = s;
  return check_finite(s, "score");
}

void scoring_backward(const ScoringNet& net, std::span<const double> params, const ScoringTape& tape, double scale,
                      std::span<double> grad) {
  const int d = net.arch.embed_dim;
  const std::size_t last = static_cast<std::size_t>((tape.backbone.length - 1) * d);
  const double* h = tape.backbone.out.data() + last;
  std::vector<double> d_out(tape.backbone.out.size(), 0.0);
  grad[net.head_b] += scale;
  for (int j = 0; j < d; ++j) {
    grad[net.head_w + static_cast<std::size_t>(j)] += scale * h[j];
    d_out[last + static_cast<std::size_t>(j)] = scale * params[net.head_w + static_cast<std::size_t>(j)];
  }
  backbone_backward(net.arch, net.backbone, params, tape.backbone, d_out, grad);
}

ScoringModel ScoringModel::create(const ArchConfig& arch, std::uint64_t seed) {
  ScoringModel m;
  m.net_ = declare_scoring(m.params_, arch);
  Rng rng(derive_seed(seed, 0x5c0e));
  init_backbone(m.params_.flat(), m.net_.backbone, arch, rng);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(arch.embed_dim));
  for (double& w : m.params_.view("score_head.w")) {
    w = stddev * rng.normal();
  }
  return m;
}

ScoringModel ScoringModel::from_params(const ArchConfig& arch, ParamSet params) {
  ScoringModel m;
  ParamSet expected;
  m.net_ = declare_scoring(expected, arch);
  if (expected.entries().size() != params.entries().size()) {
    throw ArgumentError("parameter set does not match a scoring model of this architecture");
  }
  for (std::size_t i = 0; i < expected.entries().size(); ++i) {
    if (expected.entries()[i].name != params.entries()[i].name ||
        expected.entries()[i].shape != params.entries()[i].shape) {
      throw ArgumentError("parameter " + params.entries()[i].name + " does not match the scoring architecture");
    }
  }
  m.params_ = std::move(params);
  return m;
}

void transfer_backbone(const PolicyModel& source, ScoringModel& target) {
  const auto& a = source.arch();
  const auto& b = target.arch();
  if (a.embed_dim != b.embed_dim || a.block_count != b.block_count || a.mlp_dim != b.mlp_dim ||
      a.vocab_size != b.vocab_size || a.max_length != b.max_length) {
    throw ArgumentError("backbone transfer requires matching architectures");
  }
  target.params().copy_matching(source.params(), "backbone.");
}

double score(const WeakAnnotator& annotator, const Prompt& x, const Response& y) {
  const auto& m = annotator.model;
  return scoring_forward(m.net(), m.params().flat(), encode_single(m.arch(), x, y));
}

double pairwise_logit(const PairwiseAnnotator& annotator, const Prompt& x, const Response& y1, const Response& y2) {
  const auto& m = annotator.model;
  return scoring_forward(m.net(), m.params().flat(), encode_pairwise(m.arch(), x, y1, y2));
}

PairLoss bt_example_loss(double s_plus, double s_minus) {
  const double d = s_plus - s_minus;
  const double s = sigmoid(-d);
  return {softplus(-d), -s, s};
}

PairLoss pairwise_example_loss(double f_plus_minus, double f_minus_plus) {
  // log(1 − σ(z)) = log σ(−z)
  return {softplus(-f_plus_minus) + softplus(f_minus_plus), -sigmoid(-f_plus_minus), sigmoid(f_minus_plus)};
}

double bt_batch_loss(const ScoringNet& net, std::span<const double> params,
                     std::span<const PreferenceTriplet> labeled, std::span<double> grad, Exec exec) {
  const double inv = 1.0 / static_cast<double>(labeled.size());
  auto term = [&](std::size_t i, std::span<double> g) {
    const auto& t = labeled[i];
    ScoringTape tp, tm;
    const bool want_grad = !g.empty();
    double sp = scoring_forward(net, params, encode_single(net.arch, t.prompt, preferred(t)), want_grad ? &tp : nullptr);
    double sm = scoring_forward(net, params, encode_single(net.arch, t.prompt, dispreferred(t)), want_grad ? &tm : nullptr);
    PairLoss l = bt_example_loss(sp, sm);
    if (want_grad) {
      scoring_backward(net, params, tp, inv * l.d_first, g);
      scoring_backward(net, params, tm, inv * l.d_second, g);
    }
    return l.value;
  };
  if (grad.empty()) {
    double total = 0.0;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      total += term(i, {});
    }
    return total * inv;
  }
  return batch_value_and_grad(labeled.size(), term, grad, exec) * inv;
}

double pairwise_batch_loss(const ScoringNet& net, std::span<const double> params,
                           std::span<const PreferenceTriplet> labeled, std::span<double> grad, Exec exec) {
  const double inv = 1.0 / static_cast<double>(labeled.size());
  auto term = [&](std::size_t i, std::span<double> g) {
    const auto& t = labeled[i];
    ScoringTape t1, t2;
    const bool want_grad = !g.empty();
    double f1 = scoring_forward(net, params, encode_pairwise(net.arch, t.prompt, preferred(t), dispreferred(t)),
                                want_grad ? &t1 : nullptr);
    double f2 = scoring_forward(net, params, encode_pairwise(net.arch, t.prompt, dispreferred(t), preferred(t)),
                                want_grad ? &t2 : nullptr);
    PairLoss l = pairwise_example_loss(f1, f2);
    if (want_grad) {
      scoring_backward(net, params, t1, inv * l.d_first, g);
      scoring_backward(net, params, t2, inv * l.d_second, g);
    }
    return l.value;
  };
  if (grad.empty()) {
    double total = 0.0;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      total += term(i, {});
    }
    return total * inv;
  }
  return batch_value_and_grad(labeled.size(), term, grad, exec) * inv;
}

namespace {

std::vector<Triplet> strip_labels(std::span<const PreferenceTriplet> labeled) {
  std::vector<Triplet> out;
  out.reserve(labeled.size());
  for (const auto& t : labeled) {
    out.push_back(t.unlabeled());
  }
  return out;
}

}  // namespace

TrainTrace train_weak_bt(WeakAnnotator& annotator, std::span<const PreferenceTriplet> labeled,
                         const OptimConfig& cfg, const TrainOptions& opts,
                         std::span<const PreferenceTriplet> heldout) {
  const auto heldout_items = strip_labels(heldout);
  auto agreement = [&]() -> std::optional<double> {
    if (heldout.empty()) {
      return std::nullopt;
    }
    return label_agreement(annotate_all(annotator, heldout_items, {ConfidenceKind::c1}, opts.exec), heldout);
  };
  return train_scoring(annotator.model, labeled, cfg, opts, bt_batch_loss, agreement, "bt_loss");
}

TrainTrace train_weak_pairwise(PairwiseAnnotator& annotator, std::span<const PreferenceTriplet> labeled,
                               const OptimConfig& cfg, const TrainOptions& opts,
                               std::span<const PreferenceTriplet> heldout) {
  const auto heldout_items = strip_labels(heldout);
  auto agreement = [&]() -> std::optional<double> {
    if (heldout.empty()) {
      return std::nullopt;
    }
    return label_agreement(pairwise_annotate_all(annotator, heldout_items, opts.exec), heldout);
  };
  return train_scoring(annotator.model, labeled, cfg, opts, pairwise_batch_loss, agreement, "pairwise_loss");
}

AnnotatedTriplet annotate_from_scores(const Triplet& t, double score_a, double score_b,
                                      const ConfidenceScheme& scheme) {
  AnnotatedTriplet out;
  out.source = t;
  out.chosen_side = score_a >= score_b ? Choice::A : Choice::B;
  out.score_chosen = std::max(score_a, score_b);
  out.score_rejected = std::min(score_a, score_b);
  out.confidence = confidence(scheme, out.score_chosen, out.score_rejected);
  return out;
}

AnnotatedTriplet annotate(const WeakAnnotator& annotator, const Triplet& t, const ConfidenceScheme& scheme) {
  return annotate_from_scores(t, score(annotator, t.prompt, t.response_a), score(annotator, t.prompt, t.response_b),
                              scheme);
}

std::vector<AnnotatedTriplet> annotate_all(const WeakAnnotator& annotator, std::span<const Triplet> data,
                                           const ConfidenceScheme& scheme, Exec exec) {
  std::vector<AnnotatedTriplet> out(data.size());
  for_indices(data.size(), [&](std::size_t i) { out[i] = annotate(annotator, data[i], scheme); }, exec);
  return out;
}

AnnotatedTriplet pairwise_annotate(const PairwiseAnnotator& annotator, const Triplet& t) {
  const double f_ab = pairwise_logit(annotator, t.prompt, t.response_a, t.response_b);
  const double f_ba = pairwise_logit(annotator, t.prompt, t.response_b, t.response_a);
  AnnotatedTriplet out;
  out.source = t;
  out.chosen_side = f_ab - f_ba >= 0.0 ? Choice::A : Choice::B;
  out.score_chosen = out.chosen_side == Choice::A ? f_ab : f_ba;
  out.score_rejected = out.chosen_side == Choice::A ? f_ba : f_ab;
  out.confidence = confidence({ConfidenceKind::pairwise}, out.score_chosen, out.score_rejected);
  return out;
}

std::vector<AnnotatedTriplet> pairwise_annotate_all(const PairwiseAnnotator& annotator, std::span<const Triplet> data,
                                                    Exec exec) {
  std::vector<AnnotatedTriplet> out(data.size());
  for_indices(data.size(), [&](std::size_t i) { out[i] = pairwise_annotate(annotator, data[i]); }, exec);
  return out;
}

double implicit_reward(const PolicyModel& weak_policy, const ReferenceSnapshot& weak_sft_ref, const Prompt& x,
                       const Response& y, double beta) {
  if (!(beta > 0.0)) {
    throw ArgumentError("implicit_reward: beta must be positive");
  }
  return beta * (sequence_logprob(weak_policy, x, y) - sequence_logprob(weak_sft_ref, x, y));
}

std::vector<AnnotatedTriplet> implicit_annotate_all(const PolicyModel& weak_policy,
                                                    const ReferenceSnapshot& weak_sft_ref,
                                                    std::span<const Triplet> data, double beta,
                                                    const ConfidenceScheme& scheme, Exec exec) {
  std::vector<AnnotatedTriplet> out(data.size());
  for_indices(
      data.size(),
      [&](std::size_t i) {
        const auto& t = data[i];
        out[i] = annotate_from_scores(t, implicit_reward(weak_policy, weak_sft_ref, t.prompt, t.response_a, beta),
                                      implicit_reward(weak_policy, weak_sft_ref, t.prompt, t.response_b, beta),
                                      scheme);
      },
      exec);
  return out;
}

double label_agreement(std::span<const AnnotatedTriplet> annotated, std::span<const PreferenceTriplet> labeled) {
  if (annotated.size() != labeled.size() || annotated.empty()) {
    throw ArgumentError("label_agreement: sizes differ or are empty");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < annotated.size(); ++i) {
    if (!labeled[i].human_label) {
      throw ArgumentError("label_agreement: item " + std::to_string(i) + " has no gold label");
    }
    hits += annotated[i].chosen_side == *labeled[i].human_label ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(annotated.size());
}

namespace {

Checkpoint scoring_checkpoint(const ScoringModel& m, const char* kind, std::uint64_t seed, std::int64_t step) {
  Checkpoint c;
  c.params = m.params();
  c.meta = {{"kind", "annotator"},
            {"annotator_kind", kind},
            {"architecture", m.arch().to_json()},
            {"seed", seed},
            {"step", step}};
  return c;
}

ScoringModel scoring_from_checkpoint(const Checkpoint& ckpt, const char* kind) {
  if (annotator_kind(ckpt) != kind) {
    throw IoError(std::string("expected a ") + kind + " annotator checkpoint, found " + annotator_kind(ckpt));
  }
  return ScoringModel::from_params(ArchConfig::from_json(ckpt.meta.at("architecture")), ckpt.params);
}

ParamSet extract_prefixed(const ParamSet& src, const std::string& prefix) {
  ParamSet out;
  for (const auto& e : src.entries()) {
    if (e.name.rfind(prefix, 0) == 0) {
      std::string name = e.name.substr(prefix.size());
      out.add(name, e.shape);
      auto from = src.view(e.name);
      std::copy(from.begin(), from.end(), out.view(name).begin());
    }
  }
  return out;
}

}  // namespace

Checkpoint annotator_checkpoint(const WeakAnnotator& a, std::uint64_t seed, std::int64_t step) {
  return scoring_checkpoint(a.model, "bt", seed, step);
}

Checkpoint annotator_checkpoint(const PairwiseAnnotator& a, std::uint64_t seed, std::int64_t step) {
  return scoring_checkpoint(a.model, "pairwise", seed, step);
}

Checkpoint annotator_checkpoint(const PolicyModel& weak_policy, const ReferenceSnapshot& weak_sft, double beta,
                                std::uint64_t seed, std::int64_t step) {
  Checkpoint c;
  for (const auto* part : {&weak_policy, &weak_sft.model()}) {
    const std::string prefix = part == &weak_policy ? "policy." : "reference.";
    for (const auto& e : part->params().entries()) {
      c.params.add(prefix + e.name, e.shape);
      auto from = part->params().view(e.name);
      std::copy(from.begin(), from.end(), c.params.view(prefix + e.name).begin());
    }
  }
  c.meta = {{"kind", "annotator"},
            {"annotator_kind", "implicit"},
            {"architecture", weak_policy.arch().to_json()},
            {"beta", beta},
            {"seed", seed},
            {"step", step}};
  return c;
}

std::string annotator_kind(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "annotator") {
    throw IoError("checkpoint is not an annotator");
  }
  return ckpt.meta.value("annotator_kind", std::string("?"));
}

WeakAnnotator bt_annotator_from_checkpoint(const Checkpoint& ckpt) { return {scoring_from_checkpoint(ckpt, "bt")}; }

PairwiseAnnotator pairwise_annotator_from_checkpoint(const Checkpoint& ckpt) {
  return {scoring_from_checkpoint(ckpt, "pairwise")};
}

ImplicitAnnotator implicit_annotator_from_checkpoint(const Checkpoint& ckpt) {
  if (annotator_kind(ckpt) != "implicit") {
    throw IoError("expected an implicit annotator checkpoint, found " + annotator_kind(ckpt));
  }
  ArchConfig arch = ArchConfig::from_json(ckpt.meta.at("architecture"));
  PolicyModel policy = PolicyModel::from_params(arch, extract_prefixed(ckpt.params, "policy."));
  PolicyModel reference = PolicyModel::from_params(arch, extract_prefixed(ckpt.params, "reference."));
  return {std::move(policy), snapshot_reference(reference), ckpt.meta.at("beta").get<double>()};
}

}  // namespace cwpo
