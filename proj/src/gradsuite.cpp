#include "cwpo/gradsuite.hpp"

#include <algorithm>

#include "cwpo/align.hpp"
#include "cwpo/annotator.hpp"
#include "cwpo/errors.hpp"
#include "cwpo/policy.hpp"

namespace cwpo {

namespace {

ArchConfig tiny_arch(int max_length) {
  ArchConfig a;
  a.vocab_size = 6;
  a.max_length = max_length;
  a.embed_dim = 6;
  a.mlp_dim = 8;
  a.block_count = 2;
  return a;
}

Tokens random_tokens(Rng& rng, int vocab, int min_len, int max_len) {
  Tokens t(static_cast<std::size_t>(rng.uniform_int(min_len, max_len)));
  for (int& v : t) {
    v = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  }
  return t;
}

PreferenceTriplet random_labeled(Rng& rng, int vocab) {
  PreferenceTriplet t;
  t.prompt.tokens = random_tokens(rng, vocab, 1, 3);
  t.response_a.tokens = random_tokens(rng, vocab, 1, 3);
  t.response_b.tokens = random_tokens(rng, vocab, 1, 3);
  t.human_label = rng.uniform() < 0.5 ? Choice::A : Choice::B;
  return t;
}

}  // namespace

const std::vector<std::string>& grad_check_losses() {
  static const std::vector<std::string> names = {"dpo", "ipo", "rdpo", "cw_dpo", "cw_ipo", "cw_rdpo",
                                                 "bt", "pairwise", "sft"};
  return names;
}

GradObjective make_grad_objective(const GradCheckSettings& s, std::uint64_t seed) {
  if (std::find(grad_check_losses().begin(), grad_check_losses().end(), s.loss) == grad_check_losses().end()) {
    throw ArgumentError("unknown loss '" + s.loss + "'");
  }
  if (s.batch < 1) {
    throw ArgumentError("batch must be at least 1");
  }
  Rng rng(derive_seed(seed, 0x67c));
  const int vocab = 6;
  const std::size_t n = static_cast<std::size_t>(s.batch);

  if (s.loss == "bt" || s.loss == "pairwise") {
    const bool pairwise = s.loss == "pairwise";
    ScoringModel model = ScoringModel::create(tiny_arch(pairwise ? 16 : 8), derive_seed(seed, 1));
    auto data = std::make_shared<std::vector<PreferenceTriplet>>();
    for (std::size_t i = 0; i < n; ++i) {
      data->push_back(random_labeled(rng, vocab));
    }
    ScoringNet net = model.net();
    Objective f = [net, data, pairwise](const ParamSet& p, std::span<double> g) {
      return pairwise ? pairwise_batch_loss(net, p.flat(), *data, g, Exec::serial)
                      : bt_batch_loss(net, p.flat(), *data, g, Exec::serial);
    };
    return {model.params(), f};
  }

  const ArchConfig arch = tiny_arch(8);
  PolicyModel policy = PolicyModel::create(arch, derive_seed(seed, 1));

  if (s.loss == "sft") {
    auto pairs = std::make_shared<std::vector<SftPair>>();
    for (std::size_t i = 0; i < n; ++i) {
      auto t = random_labeled(rng, vocab);
      pairs->push_back({t.prompt, t.response_a});
    }
    PolicyNet net = policy.net();
    Objective f = [net, pairs](const ParamSet& p, std::span<double> g) {
      return sft_batch_loss(net, p.flat(), *pairs, g, Exec::serial);
    };
    return {policy.params(), f};
  }

  const bool weighted = s.loss.starts_with("cw_");
  const std::string kind = weighted ? s.loss.substr(3) : s.loss;
  LossConfig cfg;
  cfg.kind = parse_loss_kind(kind);
  cfg.beta = s.beta;
  cfg.epsilon = s.epsilon;
  cfg.weighting = weighted ? Weighting::confidence : Weighting::unit;
  cfg.validate();

  const PolicyModel reference = PolicyModel::create(arch, derive_seed(seed, 2));
  auto batch = std::make_shared<std::vector<AnnotatedTriplet>>();
  for (std::size_t i = 0; i < n; ++i) {
    auto t = random_labeled(rng, vocab);
    batch->push_back({t.unlabeled(), *t.human_label, rng.uniform(), 0.0, 0.0});
  }
  auto ref = std::make_shared<ReferenceLogprobs>(
      reference_logprobs(snapshot_reference(reference), *batch, Exec::serial));
  PolicyNet net = policy.net();
  Objective f = [net, batch, ref, cfg](const ParamSet& p, std::span<double> g) {
    return policy_preference_loss(net, p.flat(), *batch, ref->chosen, ref->rejected, cfg, g, Exec::serial);
  };
  return {policy.params(), f};
}

GradSuiteReport run_grad_check(const GradCheckSettings& s) {
  if (s.seeds < 1) {
    throw ArgumentError("seeds must be at least 1");
  }
  GradSuiteReport report;
  for (int k = 0; k < s.seeds; ++k) {
    const std::uint64_t seed = derive_seed(s.seed, static_cast<std::uint64_t>(k));
    GradObjective obj = make_grad_objective(s, seed);
    const std::size_t probes = std::min(s.probes, obj.params.size());
    GradReport r = finite_diff_check(obj.objective, obj.params, probes, s.step, seed);
    report.per_seed.push_back(r.max_rel_err);
    report.max_rel_err = std::max(report.max_rel_err, r.max_rel_err);
    report.probes_total += probes;
  }
  return report;
}

}  // namespace cwpo
