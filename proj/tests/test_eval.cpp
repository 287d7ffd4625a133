#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cwpo/errors.hpp"
#include "cwpo/eval.hpp"
#include "cwpo/pipeline.hpp"
#include "helpers.hpp"

using namespace cwpo;

namespace {

ArchConfig small_arch(int vocab = 8) {
  ArchConfig a;
  a.vocab_size = vocab;
  a.max_length = 16;
  a.embed_dim = 8;
  a.mlp_dim = 8;
  return a;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

std::vector<Prompt> prompts(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({test::random_tokens(rng, 3, 8)});
  return out;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("gold reward accuracy counts strict wins") {
    const std::vector<RewardPair> r = {{2, 1}, {0, 1}, {1, 0}};
    const auto m = gra_from_rewards(r);
    CHECK(*m.value == doctest::Approx(2.0 / 3.0));
    CHECK(m.n == 3);
    const std::vector<RewardPair> ties = {{1, 1}, {2, 1}};
    CHECK(*gra_from_rewards(ties).value == 0.5);
    CHECK(gra_from_rewards(ties).extra["ties"] == 1);
    CHECK_THROWS_AS(gra_from_rewards(std::vector<RewardPair>{}), ArgumentError);
  }

  TEST_CASE("a model against its own snapshot under greedy decoding scores zero") {
    const PolicyModel m = PolicyModel::create(small_arch(), 3);
    GoldRewardSpec spec;
    spec.arch = small_arch();
    const GoldReward gold(spec);
    GenSettings greedy;
    greedy.temperature = 0.0;
    greedy.max_new = 4;
    std::vector<RewardPair> rewards;
    const auto g = gold_reward_accuracy(m, snapshot_reference(m), prompts(40, 1), gold, greedy, 5, &rewards);
    CHECK(*g.value == 0.0);
    CHECK(rewards.size() == 40);
    for (const auto& r : rewards) CHECK(r.aligned == r.sft);

    // Paired sampling streams make even temperature sampling tie.
    GenSettings warm;
    const auto w = gold_reward_accuracy(m, snapshot_reference(m), prompts(40, 1), gold, warm, 5);
    CHECK(*w.value == 0.0);
    CHECK(w.settings["temperature"] == 0.95);
  }

  TEST_CASE("gold reward accuracy is in range and exec independent") {
    const PolicyModel a = PolicyModel::create(small_arch(), 4);
    const PolicyModel b = PolicyModel::create(small_arch(), 5);
    GoldRewardSpec spec;
    spec.arch = small_arch();
    const GoldReward gold(spec);
    const auto ps = prompts(50, 2);
    const auto s = gold_reward_accuracy(a, snapshot_reference(b), ps, gold, GenSettings{}, 9, nullptr, Exec::serial);
    const auto p = gold_reward_accuracy(a, snapshot_reference(b), ps, gold, GenSettings{}, 9, nullptr, Exec::parallel);
    CHECK(*s.value >= 0.0);
    CHECK(*s.value <= 1.0);
    CHECK(*s.value == *p.value);
  }

  TEST_CASE("win rate excludes ties") {
    const std::vector<double> a = {1, 1, 1, 1, 1, 1, 1, 0, 0, 0};
    const std::vector<double> b = {0, 0, 0, 0, 0, 0, 0, 1, 1, 1};
    const auto w = win_rate_from_rewards(a, b);
    CHECK(*w.value == doctest::Approx(0.7));
    CHECK(*w.value + *win_rate_from_rewards(b, a).value == doctest::Approx(1.0).epsilon(1e-15));

    const std::vector<double> c = {1, 2, 3, 3};
    const std::vector<double> d = {0, 2, 4, 3};
    const auto t = win_rate_from_rewards(c, d);
    CHECK(*t.value == 0.5);
    CHECK(t.n == 2);
    CHECK(t.extra["ties"] == 2);

    const auto all = win_rate_from_rewards(c, c);
    CHECK_FALSE(all.value.has_value());
    CHECK(all.n == 0);
    CHECK(all.extra["ties"] == 4);
  }

  TEST_CASE("win rate of a model against itself is undefined") {
    const PolicyModel m = PolicyModel::create(small_arch(), 6);
    GoldRewardSpec spec;
    spec.arch = small_arch();
    const auto w = win_rate(m, m, prompts(20, 3), GoldReward(spec), GenSettings{}, 1);
    CHECK_FALSE(w.value.has_value());
    CHECK(w.n == 0);
  }

  TEST_CASE("annotator agreement") {
    Rng rng(1);
    std::vector<AnnotatedTriplet> ann(4000);
    std::vector<Choice> gold(4000);
    std::size_t gold_a = 0;
    for (std::size_t i = 0; i < ann.size(); ++i) {
      ann[i].source = test::random_triplet(rng, 8);
      // A constant annotator ties every pair and so picks response_a.
      ann[i].chosen_side = Choice::A;
      gold[i] = rng.uniform() < 0.62 ? Choice::A : Choice::B;
      gold_a += gold[i] == Choice::A;
    }
    const auto constant = annotator_agreement(ann, EvaluationChannel{gold});
    CHECK(*constant.value == static_cast<double>(gold_a) / 4000.0);

    for (auto& a : ann) a.chosen_side = rng.uniform() < 0.5 ? Choice::A : Choice::B;
    const double v = *annotator_agreement(ann, EvaluationChannel{gold}).value;
    CHECK(std::abs(v - 0.5) <= 3 * std::sqrt(0.25 / 4000));

    std::vector<std::optional<Choice>> missing(gold.begin(), gold.end());
    missing[17].reset();
    CHECK_THROWS_AS(annotator_agreement(ann, missing), ArgumentError);
    CHECK_THROWS_AS(annotator_agreement(ann, EvaluationChannel{{Choice::A}}), ArgumentError);
  }

  TEST_CASE("the gold reward as annotator matches the noise rate") {
    PipelineConfig cfg;
    cfg.data.n = 3000;
    cfg.data.flip_noise = 0.2;
    const auto data = generate_data(cfg);
    const GoldReward gold(cfg.gold_spec());
    std::vector<AnnotatedTriplet> ann;
    std::vector<Choice> labels;
    double expected = 0;
    for (const auto& t : data) {
      const double ra = gold(t.prompt, t.response_a), rb = gold(t.prompt, t.response_b);
      ann.push_back(annotate_from_scores(t.unlabeled(), ra, rb, ConfidenceScheme{}));
      labels.push_back(*t.human_label);
      // Probability that the sampled label equals the gold argmax.
      const double p = human_label_probability(std::max(ra, rb), std::min(ra, rb), 0.2);
      expected += p;
    }
    expected /= static_cast<double>(data.size());
    const double v = *annotator_agreement(ann, EvaluationChannel{labels}).value;
    CHECK(std::abs(v - expected) <= 4 * std::sqrt(0.25 / static_cast<double>(data.size())));
  }

  TEST_CASE("confidence histogram") {
    std::vector<AnnotatedTriplet> zeros(25);
    auto h = confidence_histogram(zeros, 10);
    REQUIRE(h.size() == 10);
    CHECK(h[0].count == 25);
    CHECK(h[0].low == 0.0);
    CHECK(h[9].high == 1.0);

    Rng rng(2);
    std::vector<AnnotatedTriplet> mixed(333);
    for (auto& a : mixed) a.confidence = rng.uniform();
    mixed[0].confidence = 1.0;
    for (int bins : {1, 3, 7, 20}) {
      const auto hist = confidence_histogram(mixed, bins);
      std::size_t total = 0;
      for (const auto& b : hist) total += b.count;
      CHECK(total == mixed.size());
    }
    CHECK(confidence_histogram(mixed, 1)[0].count == 333);
    CHECK(confidence_histogram(mixed, 4).back().count >= 1);
    CHECK_THROWS_AS(confidence_histogram(mixed, 0), ArgumentError);
  }

  TEST_CASE("metric files") {
    test::TempDir dir("eval_files");
    MetricReport a;
    a.name = "gold_reward_accuracy";
    a.value = 0.625;
    a.n = 8;
    a.seed = 3;
    MetricReport b;
    b.name = "win_rate";
    b.n = 0;
    b.seed = 3;
    const std::vector<MetricReport> ms = {a, b};
    write_metrics_csv(dir / "m.csv", ms);
    CHECK(slurp(dir / "m.csv") == "metric,value,n,seed\ngold_reward_accuracy,0.625,8,3\nwin_rate,nan,0,3\n");
    write_metrics_json(dir / "m.json", ms);
    const auto j = nlohmann::json::parse(slurp(dir / "m.json"));
    CHECK(j.dump().find("0.625") != std::string::npos);

    const std::vector<HistogramBin> hist = {{0, 0.5, 3}, {0.5, 1, 1}};
    write_histogram_csv(dir / "h.csv", hist);
    CHECK(slurp(dir / "h.csv") == "bin_low,bin_high,count\n0,0.5,3\n0.5,1,1\n");

    const std::vector<RewardPair> r = {{1.5, 1.0}, {0.0, 0.25}};
    write_reward_gaps_csv(dir / "g.csv", r);
    CHECK(slurp(dir / "g.csv") == "prompt_index,reward_aligned,reward_sft,gap\n0,1.5,1,0.5\n1,0,0.25,-0.25\n");
    CHECK(format_double(0.1) == "0.1");
  }
}
