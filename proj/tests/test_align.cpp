#include <doctest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cwpo/align.hpp"
#include "cwpo/errors.hpp"
#include "cwpo/gradcheck.hpp"
#include "cwpo/losses.hpp"
#include "cwpo/numerics.hpp"
#include "helpers.hpp"

using namespace cwpo;

namespace {

LossConfig make(LossKind kind, double beta = 0.5, double eps = 0.1, Weighting w = Weighting::confidence,
                Reduction r = Reduction::mean) {
  LossConfig c;
  c.kind = kind;
  c.beta = beta;
  c.epsilon = eps;
  c.weighting = w;
  c.reduction = r;
  return c;
}

LogRatioBatch random_batch(Rng& rng, std::size_t n) {
  LogRatioBatch b(n);
  for (auto& e : b) {
    e.lr_plus = rng.normal() * 2;
    e.lr_minus = rng.normal() * 2;
    e.confidence = rng.uniform();
  }
  return b;
}

ArchConfig tiny_arch() {
  ArchConfig a;
  a.vocab_size = 6;
  a.max_length = 12;
  a.embed_dim = 8;
  a.mlp_dim = 8;
  return a;
}

std::vector<AnnotatedTriplet> random_annotated(Rng& rng, std::size_t n) {
  std::vector<AnnotatedTriplet> out;
  for (std::size_t i = 0; i < n; ++i) {
    AnnotatedTriplet a;
    a.source = test::random_triplet(rng, 6, 2, 3);
    a.chosen_side = rng.uniform() < 0.5 ? Choice::A : Choice::B;
    a.confidence = rng.uniform();
    out.push_back(a);
  }
  return out;
}

}  // namespace

TEST_SUITE("align") {
  TEST_CASE("dpo examples") {
    const auto cfg = make(LossKind::dpo);
    CHECK(dpo_loss(LogRatioBatch{{0.3, 0.3, 1.0}}, cfg) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(dpo_loss(LogRatioBatch{{0.2, -0.1, 0.8}}, cfg) == doctest::Approx(0.4967656382316257).epsilon(1e-13));
    CHECK(std::abs(dpo_loss(LogRatioBatch{{0.2, -0.1, 0.8}}, cfg) - 0.4967) < 1e-4);
  }

  TEST_CASE("ipo examples") {
    const auto cfg = make(LossKind::ipo);
    CHECK(ipo_loss(LogRatioBatch{{1.0, 0.0, 0.37}}, cfg) == 0.0);
    CHECK(ipo_loss(LogRatioBatch{{0.0, 0.0, 1.0}}, cfg) == 1.0);
    CHECK(ipo_loss(LogRatioBatch{{5.0, -3.0, 0.0}}, cfg) == 0.0);
  }

  TEST_CASE("rdpo examples") {
    const auto c = rdpo_coefficients(0.1);
    CHECK(c.positive == 1.125);
    CHECK(c.negative == 0.125);
    CHECK(rdpo_loss(LogRatioBatch{{0.4, 0.4, 1.0}}, make(LossKind::rdpo)) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK_THROWS_AS(rdpo_coefficients(0.5), ArgumentError);
    CHECK_THROWS_AS(make(LossKind::rdpo, 0.5, 0.5).validate(), ArgumentError);
    CHECK_THROWS_AS(make(LossKind::dpo, 0.0).validate(), ArgumentError);
    CHECK_THROWS_AS(dpo_loss(LogRatioBatch{{0, 0, 1}}, make(LossKind::ipo)), ArgumentError);
  }

  TEST_CASE("unit weighting reproduces textbook losses") {
    Rng rng(1);
    for (int k = 0; k < 100; ++k) {
      const auto batch = random_batch(rng, 1 + rng.below(20));
      const double beta = 0.1 + rng.uniform() * 2;
      const double eps = rng.uniform() * 0.45;
      for (auto kind : {LossKind::dpo, LossKind::ipo, LossKind::rdpo}) {
        double textbook = 0;
        for (const auto& e : batch) {
          const double g = e.lr_plus - e.lr_minus;
          switch (kind) {
            case LossKind::dpo: textbook += -log_sigmoid(beta * g); break;
            case LossKind::ipo: textbook += (g - 1 / (2 * beta)) * (g - 1 / (2 * beta)); break;
            case LossKind::rdpo:
              textbook += -(1 - eps) / (1 - 2 * eps) * log_sigmoid(beta * g) +
                          eps / (1 - 2 * eps) * log_sigmoid(-beta * g);
              break;
          }
        }
        textbook /= static_cast<double>(batch.size());
        const double v = confidence_weighted_loss(batch, make(kind, beta, eps, Weighting::unit));
        CHECK(test::rel_diff(v, textbook) <= 1e-12);
      }
      const double d = confidence_weighted_loss(batch, make(LossKind::dpo, beta, 0, Weighting::unit));
      const double r = confidence_weighted_loss(batch, make(LossKind::rdpo, beta, 0, Weighting::unit));
      CHECK(test::rel_diff(d, r) <= 1e-12);
    }
  }

  TEST_CASE("weighted reduction is the manual sum") {
    Rng rng(2);
    const auto batch = random_batch(rng, 13);
    for (auto kind : {LossKind::dpo, LossKind::ipo, LossKind::rdpo}) {
      const auto cfg = make(kind, 0.7, 0.2, Weighting::confidence, Reduction::sum);
      double manual = 0;
      for (const auto& e : batch) manual += e.confidence * per_example_loss(cfg, e.lr_plus, e.lr_minus).value;
      CHECK(confidence_weighted_loss(batch, cfg) == manual);
      auto mean_cfg = cfg;
      mean_cfg.reduction = Reduction::mean;
      CHECK(confidence_weighted_loss(batch, mean_cfg) == doctest::Approx(manual / 13).epsilon(1e-14));
      const LogRatioBatch one = {batch[4]};
      CHECK(confidence_weighted_loss(one, mean_cfg) ==
            batch[4].confidence * per_example_loss(cfg, batch[4].lr_plus, batch[4].lr_minus).value);
    }
  }

  TEST_CASE("zero weights annihilate loss and gradient") {
    Rng rng(3);
    auto batch = random_batch(rng, 9);
    for (auto& e : batch) e.confidence = 0.0;
    for (auto kind : {LossKind::dpo, LossKind::ipo, LossKind::rdpo}) {
      std::vector<double> gp(9, 1.0), gm(9, 1.0);
      CHECK(confidence_weighted_loss(batch, make(kind), gp, gm) == 0.0);
      for (int i = 0; i < 9; ++i) {
        CHECK(gp[i] == 0.0);
        CHECK(gm[i] == 0.0);
      }
    }
  }

  TEST_CASE("loss partials match central differences") {
    Rng rng(4);
    const auto batch = random_batch(rng, 7);
    for (auto kind : {LossKind::dpo, LossKind::ipo, LossKind::rdpo}) {
      const auto cfg = make(kind, 0.8, 0.15);
      std::vector<double> gp(7), gm(7);
      confidence_weighted_loss(batch, cfg, gp, gm);
      const double h = 1e-5;
      for (int i = 0; i < 7; ++i) {
        auto up = batch, dn = batch;
        up[i].lr_plus += h;
        dn[i].lr_plus -= h;
        const double np = (confidence_weighted_loss(up, cfg) - confidence_weighted_loss(dn, cfg)) / (2 * h);
        CHECK(std::abs(np - gp[i]) <= 1e-7 * std::max(1.0, std::abs(gp[i])));
        up = batch;
        dn = batch;
        up[i].lr_minus += h;
        dn[i].lr_minus -= h;
        const double nm = (confidence_weighted_loss(up, cfg) - confidence_weighted_loss(dn, cfg)) / (2 * h);
        CHECK(std::abs(nm - gm[i]) <= 1e-7 * std::max(1.0, std::abs(gm[i])));
      }
    }
  }

  TEST_CASE("dpo decreases in the margin and ipo is minimized at the target gap") {
    const auto dpo = make(LossKind::dpo);
    double prev = per_example_loss(dpo, -30, 0).value;
    for (int k = -299; k <= 300; ++k) {
      const double v = per_example_loss(dpo, 0.1 * k, 0).value;
      CHECK(v < prev);
      CHECK(v >= 0);
      prev = v;
    }
    for (double beta : {0.1, 0.5, 2.0}) {
      const auto ipo = make(LossKind::ipo, beta);
      const double target = 1 / (2 * beta);
      CHECK(per_example_loss(ipo, target, 0).value == 0.0);
      CHECK(per_example_loss(ipo, target + 0.01, 0).value > 0.0);
      CHECK(per_example_loss(ipo, target - 0.01, 0).value > 0.0);
    }
  }

  TEST_CASE("rdpo is continuous in epsilon and finite") {
    Rng rng(5);
    const auto batch = random_batch(rng, 10);
    const double at0 = confidence_weighted_loss(batch, make(LossKind::dpo));
    CHECK(test::rel_diff(confidence_weighted_loss(batch, make(LossKind::rdpo, 0.5, 0.0)), at0) <= 1e-12);
    CHECK(std::abs(confidence_weighted_loss(batch, make(LossKind::rdpo, 0.5, 1e-9)) - at0) < 1e-7);
    for (int k = 1; k < 49; ++k) {
      const double e = k * 0.01;
      const double v = confidence_weighted_loss(batch, make(LossKind::rdpo, 0.5, e));
      const double near = confidence_weighted_loss(batch, make(LossKind::rdpo, 0.5, e + 1e-8));
      CAPTURE(e);
      CHECK(std::isfinite(v));
      CHECK(std::abs(near - v) < 1e-4);
    }
    for (double g : {-1e6, -50.0, 0.0, 50.0, 1e6}) {
      CHECK(std::isfinite(per_example_loss(make(LossKind::rdpo), g, 0).value));
      CHECK(std::isfinite(per_example_loss(make(LossKind::dpo), g, 0).value));
    }
  }

  TEST_CASE("shipped oracle vectors") {
    std::ifstream in(std::string(CWPO_TEST_DATA) + "/loss_vectors.jsonl");
    REQUIRE(in.good());
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      const auto cfg = make(parse_loss_kind(j["kind"].get<std::string>()), j["beta"], j["epsilon"]);
      const LogRatioBatch b = {{j["lr_plus"], j["lr_minus"], j["C"]}};
      CAPTURE(line);
      CHECK(std::abs(confidence_weighted_loss(b, cfg) - j["expected_loss"].get<double>()) <= 1e-10);
      ++rows;
    }
    CHECK(rows > 100);
  }

  TEST_CASE("policy loss serial and parallel are bit identical") {
    Rng rng(6);
    const PolicyModel pol = PolicyModel::create(tiny_arch(), 1);
    const ReferenceSnapshot ref = snapshot_reference(PolicyModel::create(tiny_arch(), 2));
    const auto data = random_annotated(rng, 29);
    const auto rl = reference_logprobs(ref, data, Exec::serial);
    CHECK(rl.chosen == reference_logprobs(ref, data, Exec::parallel).chosen);
    for (auto kind : {LossKind::dpo, LossKind::ipo, LossKind::rdpo}) {
      std::vector<double> gs(pol.params().size()), gp(pol.params().size());
      const double vs =
          policy_preference_loss(pol.net(), pol.params().flat(), data, rl.chosen, rl.rejected, make(kind), gs, Exec::serial);
      const double vp = policy_preference_loss(pol.net(), pol.params().flat(), data, rl.chosen, rl.rejected, make(kind),
                                               gp, Exec::parallel);
      CHECK(vs == vp);
      CHECK(gs == gp);
    }
  }

  TEST_CASE("zero-confidence policy batch has zero gradient") {
    Rng rng(7);
    const PolicyModel pol = PolicyModel::create(tiny_arch(), 3);
    const ReferenceSnapshot ref = snapshot_reference(PolicyModel::create(tiny_arch(), 4));
    auto data = random_annotated(rng, 5);
    for (auto& a : data) a.confidence = 0.0;
    const auto rl = reference_logprobs(ref, data);
    Objective f = [&](const ParamSet& p, std::span<double> g) {
      return policy_preference_loss(pol.net(), p.flat(), data, rl.chosen, rl.rejected, make(LossKind::dpo), g,
                                    Exec::serial);
    };
    const auto rep = finite_diff_check(f, pol.params(), 32, 1e-4, 1);
    for (std::size_t i : rep.probes) {
      CHECK(rep.analytic[i] == 0.0);
      CHECK(rep.numeric[i] == 0.0);
    }
  }

  TEST_CASE("align_policy examples") {
    Rng rng(8);
    const PolicyModel start = PolicyModel::create(tiny_arch(), 5);
    const ReferenceSnapshot ref = snapshot_reference(start);
    OptimConfig optim;
    optim.learning_rate = 1e-2;

    PolicyModel untouched = start;
    AlignOptions none;
    none.epochs = 0;
    const auto t0 = align_policy(untouched, ref, random_annotated(rng, 4), make(LossKind::dpo), optim, none);
    CHECK(untouched.params() == start.params());
    CHECK(t0.steps == 0);

    auto single = random_annotated(rng, 1);
    single[0].confidence = 1.0;
    auto margin = [&](const PolicyModel& m) {
      return (sequence_logprob(m, single[0].prompt(), single[0].chosen()) -
              sequence_logprob(ref, single[0].prompt(), single[0].chosen())) -
             (sequence_logprob(m, single[0].prompt(), single[0].rejected()) -
              sequence_logprob(ref, single[0].prompt(), single[0].rejected()));
    };
    PolicyModel pol = start;
    CHECK(margin(pol) == 0.0);
    AlignOptions opts;
    opts.epochs = 20;
    align_policy(pol, ref, single, make(LossKind::dpo), optim, opts);
    CHECK(margin(pol) > 0.0);

    const auto data = random_annotated(rng, 24);
    PolicyModel a = start, b = start, c = start;
    opts.epochs = 3;
    opts.batch_size = 5;
    opts.seed = 11;
    align_policy(a, ref, data, make(LossKind::rdpo), optim, opts);
    align_policy(b, ref, data, make(LossKind::rdpo), optim, opts);
    opts.exec = Exec::serial;
    const auto trace = align_policy(c, ref, data, make(LossKind::rdpo), optim, opts);
    CHECK(a.params() == b.params());
    CHECK(a.params() == c.params());
    CHECK(trace.epochs.size() == 3);
    CHECK(trace.epochs[0].mean_margin.has_value());

    CHECK_THROWS_AS(align_policy(a, ref, std::span<const AnnotatedTriplet>{}, make(LossKind::dpo), optim, opts),
                    ArgumentError);
  }

  TEST_CASE("align probes run after every epoch") {
    Rng rng(9);
    PolicyModel pol = PolicyModel::create(tiny_arch(), 6);
    const ReferenceSnapshot ref = snapshot_reference(pol);
    AlignOptions opts;
    opts.epochs = 3;
    std::vector<int> seen;
    opts.probe = [&](int epoch, const PolicyModel&) { seen.push_back(epoch); };
    align_policy(pol, ref, random_annotated(rng, 8), make(LossKind::ipo), OptimConfig{}, opts);
    CHECK(seen == std::vector<int>{0, 1, 2});
  }
}
