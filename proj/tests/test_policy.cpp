#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cwpo/errors.hpp"
#include "cwpo/gradcheck.hpp"
#include "cwpo/pipeline.hpp"
#include "cwpo/policy.hpp"
#include "helpers.hpp"

using namespace cwpo;

namespace {

ArchConfig tiny_arch(int vocab = 8, int max_length = 16) {
  ArchConfig a;
  a.vocab_size = vocab;
  a.max_length = max_length;
  a.embed_dim = 8;
  a.mlp_dim = 12;
  a.block_count = 2;
  return a;
}

PolicyModel zeroed(const ArchConfig& arch) {
  PolicyModel m = PolicyModel::create(arch, 1);
  for (double& v : m.params().flat()) v = 0.0;
  return m;
}

std::vector<SftPair> pairs_from(const std::vector<PreferenceTriplet>& data) {
  std::vector<SftPair> out;
  for (const auto& t : data) out.push_back({t.prompt, t.response(*t.human_label)});
  return out;
}

}  // namespace

TEST_SUITE("policy") {
  TEST_CASE("uniform model log-probability") {
    const PolicyModel m = zeroed(tiny_arch(4));
    CHECK(sequence_logprob(m, Prompt{{1, 2}}, Response{{0, 3, 1}}) == doctest::Approx(3 * std::log(0.25)).epsilon(1e-14));
  }

  TEST_CASE("invalid sequences are rejected") {
    const PolicyModel m = PolicyModel::create(tiny_arch(4, 8), 2);
    CHECK_THROWS_AS(sequence_logprob(m, Prompt{{1}}, Response{{}}), LengthError);
    CHECK_THROWS_AS(sequence_logprob(m, Prompt{{1}}, Response{{4}}), RangeError);
    CHECK_THROWS_AS(sequence_logprob(m, Prompt{{1, 1, 1, 1}}, Response{{1, 1, 1, 1}}), LengthError);
  }

  TEST_CASE("log-probabilities are finite and non-positive") {
    Rng rng(5);
    for (int k = 0; k < 20; ++k) {
      const PolicyModel m = PolicyModel::create(tiny_arch(), rng.next());
      const Triplet t = test::random_triplet(rng, 8, rng.uniform_int(1, 6), rng.uniform_int(1, 6));
      const double lp = sequence_logprob(m, t.prompt, t.response_a);
      CHECK(std::isfinite(lp));
      CHECK(lp <= 0.0);
    }
  }

  TEST_CASE("next-token distributions are normalized") {
    Rng rng(9);
    for (int k = 0; k < 30; ++k) {
      PolicyModel m = PolicyModel::create(tiny_arch(), rng.next());
      // Large weights stress the normalization.
      for (double& v : m.params().flat()) v *= 1.0 + 4.0 * rng.uniform();
      const Prompt x{test::random_tokens(rng, rng.uniform_int(1, 5), 8)};
      const Tokens partial = test::random_tokens(rng, rng.uniform_int(0, 5), 8);
      double total = 0.0;
      for (double lp : next_token_logprobs(m, x, partial)) total += std::exp(lp);
      CHECK(total >= 1 - 1e-9);
      CHECK(total <= 1 + 1e-9);
    }
  }

  TEST_CASE("sequence log-probability gradient") {
    Rng rng(13);
    for (int seed = 0; seed < 3; ++seed) {
      const PolicyModel m = PolicyModel::create(tiny_arch(), 100 + seed);
      const Triplet t = test::random_triplet(rng, 8, 4, 5);
      Objective f = [&](const ParamSet& p, std::span<double> g) {
        PolicyTape tape;
        const double v = policy_logprob(m.net(), p.flat(), t.prompt, t.response_a, g.empty() ? nullptr : &tape);
        if (!g.empty()) policy_logprob_backward(m.net(), p.flat(), tape, 1.0, g);
        return v;
      };
      CHECK(finite_diff_check(f, m.params(), 32, 1e-4, seed).max_rel_err < 1e-4);
    }
  }

  TEST_CASE("greedy decoding") {
    const PolicyModel m = PolicyModel::create(tiny_arch(), 21);
    const Prompt x{{1, 2, 3}};
    Rng r1(1), r2(999);
    const Response a = sample_response(m, x, 5, 0.0, r1);
    const Response b = sample_response(m, x, 5, 0.0, r2);
    CHECK(a == b);
    CHECK(a.tokens.size() == 5);

    // Positive rescaling of the output logits leaves the argmax unchanged.
    PolicyModel scaled = m;
    for (double& v : scaled.params().view("lm_head.w")) v *= 3.7;
    for (double& v : scaled.params().view("lm_head.b")) v *= 3.7;
    Rng r3(1);
    CHECK(sample_response(scaled, x, 5, 0.0, r3) == a);
  }

  TEST_CASE("sampling is seeded") {
    const PolicyModel m = PolicyModel::create(tiny_arch(), 22);
    const Prompt x{{4, 4}};
    Rng r1(17), r2(17);
    CHECK(sample_response(m, x, 6, 0.95, r1) == sample_response(m, x, 6, 0.95, r2));
  }

  TEST_CASE("degenerate model emits token zero") {
    PolicyModel m = zeroed(tiny_arch(2));
    m.params().view("lm_head.b")[0] = 1000.0;
    Rng rng(3);
    for (int k = 0; k < 10; ++k) {
      CHECK(sample_response(m, Prompt{{1}}, 4, 1.0, rng).tokens == Tokens{0, 0, 0, 0});
    }
  }

  TEST_CASE("generation respects max_length") {
    const PolicyModel m = PolicyModel::create(tiny_arch(8, 6), 23);
    Rng rng(1);
    const Response y = sample_response(m, Prompt{{1, 2, 3}}, 10, 1.0, rng);
    CHECK(y.tokens.size() == 2);  // 3 prompt + separator + 2 = 6
  }

  TEST_CASE("reference snapshots are frozen") {
    PolicyModel m = PolicyModel::create(tiny_arch(), 31);
    const ReferenceSnapshot s1 = snapshot_reference(m);
    const ReferenceSnapshot s2 = snapshot_reference(m);
    Rng rng(2);
    std::vector<Triplet> probes;
    std::vector<double> before;
    for (int k = 0; k < 5; ++k) {
      probes.push_back(test::random_triplet(rng, 8));
      before.push_back(sequence_logprob(s1, probes.back().prompt, probes.back().response_a));
      CHECK(before.back() == sequence_logprob(m, probes.back().prompt, probes.back().response_a));
      CHECK(before.back() == sequence_logprob(s2, probes.back().prompt, probes.back().response_a));
    }
    std::vector<SftPair> pairs;
    for (const auto& t : probes) pairs.push_back({t.prompt, t.response_a});
    OptimConfig cfg;
    cfg.learning_rate = 1e-2;
    TrainOptions opts;
    opts.epochs = 20;
    opts.batch_size = 1;
    const auto trace = sft_train(m, pairs, cfg, opts);
    CHECK(trace.steps == 100);
    for (std::size_t k = 0; k < probes.size(); ++k) {
      CHECK(sequence_logprob(s1, probes[k].prompt, probes[k].response_a) == before[k]);
      CHECK(sequence_logprob(m, probes[k].prompt, probes[k].response_a) != before[k]);
    }
  }

  TEST_CASE("sft on one pair reduces the loss") {
    PolicyModel m = PolicyModel::create(tiny_arch(), 41);
    const std::vector<SftPair> pairs = {{Prompt{{1, 2}}, Response{{3, 4, 5}}}};
    const double initial = sft_batch_loss(m.net(), m.params().flat(), pairs, {}, Exec::serial);
    OptimConfig cfg;
    cfg.learning_rate = 1e-2;
    TrainOptions opts;
    opts.epochs = 50;
    sft_train(m, pairs, cfg, opts);
    CHECK(sft_batch_loss(m.net(), m.params().flat(), pairs, {}, Exec::serial) < initial);
  }

  TEST_CASE("sft with zero epochs is a no-op") {
    PolicyModel m = PolicyModel::create(tiny_arch(), 42);
    const ParamSet before = m.params();
    const std::vector<SftPair> pairs = {{Prompt{{1}}, Response{{2}}}};
    TrainOptions opts;
    opts.epochs = 0;
    const auto trace = sft_train(m, pairs, OptimConfig{}, opts);
    CHECK(trace.epochs.empty());
    CHECK(trace.steps == 0);
    CHECK(m.params() == before);
    CHECK_THROWS_AS(sft_train(m, std::span<const SftPair>{}, OptimConfig{}, TrainOptions{}), ArgumentError);
  }

  TEST_CASE("sft epoch loss mostly decreases") {
    // Five transitions per seed: the initial loss, then one per epoch.
    PipelineConfig cfg;
    cfg.data.n = 200;
    const auto pairs = pairs_from(generate_data(cfg));
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      CAPTURE(seed);
      PolicyModel m = PolicyModel::create(cfg.policy_arch(), seed);
      std::vector<double> curve = {sft_batch_loss(m.net(), m.params().flat(), pairs, {}, Exec::parallel)};
      TrainOptions opts;
      opts.epochs = 5;
      opts.batch_size = cfg.sft.batch_size;
      opts.seed = seed;
      for (const auto& e : sft_train(m, pairs, cfg.sft.optim, opts).epochs) curve.push_back(e.loss);
      REQUIRE(curve.size() == 6);
      int down = 0;
      for (std::size_t i = 1; i < curve.size(); ++i) down += curve[i] <= curve[i - 1];
      CHECK(down >= 4);
    }
  }

  TEST_CASE("sft loss is identical serial and parallel") {
    const PolicyModel m = PolicyModel::create(tiny_arch(), 51);
    Rng rng(6);
    std::vector<SftPair> pairs;
    for (int k = 0; k < 33; ++k) {
      const Triplet t = test::random_triplet(rng, 8);
      pairs.push_back({t.prompt, t.response_b});
    }
    std::vector<double> gs(m.params().size()), gp(m.params().size());
    const double vs = sft_batch_loss(m.net(), m.params().flat(), pairs, gs, Exec::serial);
    const double vp = sft_batch_loss(m.net(), m.params().flat(), pairs, gp, Exec::parallel);
    CHECK(std::memcmp(&vs, &vp, sizeof(double)) == 0);
    CHECK(gs == gp);

    PolicyModel a = PolicyModel::create(tiny_arch(), 52), b = a;
    TrainOptions opts;
    opts.epochs = 2;
    opts.batch_size = 5;
    opts.exec = Exec::serial;
    sft_train(a, pairs, OptimConfig{}, opts);
    opts.exec = Exec::parallel;
    sft_train(b, pairs, OptimConfig{}, opts);
    CHECK(a.params() == b.params());
  }

  TEST_CASE("policy checkpoints") {
    const PolicyModel m = PolicyModel::create(tiny_arch(), 61);
    const Checkpoint c = policy_checkpoint(m, 61, 9);
    CHECK(c.meta["kind"] == "policy");
    CHECK(c.meta["step"] == 9);
    const PolicyModel back = policy_from_checkpoint(c, tiny_arch());
    CHECK(back.params() == m.params());
    CHECK_THROWS_AS(policy_from_checkpoint(c, tiny_arch(9)), IoError);
    Checkpoint wrong = c;
    wrong.meta["kind"] = "annotator";
    CHECK_THROWS_AS(policy_from_checkpoint(wrong), IoError);
  }

  TEST_CASE("divergent training aborts with the last good parameters") {
    PolicyModel m = PolicyModel::create(tiny_arch(), 71);
    const std::vector<SftPair> pairs = {{Prompt{{1, 2}}, Response{{3, 4, 5}}}};
    OptimConfig cfg;
    cfg.learning_rate = 1e300;
    TrainOptions opts;
    opts.epochs = 20;
    try {
      sft_train(m, pairs, cfg, opts);
      FAIL("expected divergence");
    } catch (const TrainingAborted& e) {
      for (double v : e.last_good().flat()) CHECK(std::isfinite(v));
      CHECK(e.trace().steps >= 1);
    }
  }
}
