#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cwpo/config.hpp"
#include "cwpo/errors.hpp"
#include "cwpo/jsonl.hpp"
#include "cwpo/pipeline.hpp"
#include "helpers.hpp"

using namespace cwpo;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

PipelineConfig small_config() {
  PipelineConfig c;
  c.seed = 3;
  c.data.n = 240;
  c.data.vocab = 12;
  c.data.prompt_length = {3, 4};
  c.data.response_length = {3, 3};
  c.data.gold_shape = {8, 16, 1};
  c.weak.epochs = 2;
  c.weak.sft_epochs = 1;
  c.weak.dpo_epochs = 1;
  c.weak.shape = {8, 16, 1};
  c.sft.epochs = 1;
  c.sft.shape = {8, 16, 1};
  c.align.epochs = 1;
  c.eval.prompts = 20;
  c.eval.gen.max_new = 3;
  return c;
}

std::vector<AnnotatedTriplet> with_confidences(const std::vector<double>& cs) {
  std::vector<AnnotatedTriplet> out(cs.size());
  for (std::size_t i = 0; i < cs.size(); ++i) {
    out[i].source.prompt.tokens = {static_cast<int>(i % 5)};
    out[i].confidence = cs[i];
  }
  return out;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config parser") {
    const json t = parse(
        "# run file\n"
        "[run]\nseed = 11\nbaseline = \"ws_dpo\"\n\n"
        "[align]\nbeta = 0.25 # inline comment\nkind = \"rdpo\"\n"
        "[align.optim]\nlr = 2e-4\nschedule = \"constant\"\n"
        "[eval]\nprobes = true\nlist = [1, 2, 3]\n");
    CHECK(t["run"]["seed"] == 11);
    CHECK(t["run"]["baseline"] == "ws_dpo");
    CHECK(t["align"]["beta"] == 0.25);
    CHECK(t["align"]["optim"]["lr"] == 2e-4);
    CHECK(t["eval"]["probes"] == true);
    CHECK(t["eval"]["list"] == json::array({1, 2, 3}));
    CHECK(parse(render_config(t)) == t);
  }

  TEST_CASE("config parser errors carry the key path or line") {
    try {
      parse("[align]\nbeta = 1\nbeta = 2\n");
      FAIL("expected duplicate key");
    } catch (const ConfigError& e) {
      CHECK(e.key_path() == "align.beta");
    }
    CHECK_THROWS_AS(parse("[align\n"), ConfigError);
    CHECK_THROWS_AS(parse("[a]\nx = \n"), ConfigError);
    CHECK_THROWS_AS(parse("[a]\nx = \"open\n"), ConfigError);
    CHECK_THROWS_AS(parse("justtext\n"), ConfigError);
  }

  TEST_CASE("pipeline config validation names the key") {
    auto expect_key = [](const json& tree, const std::string& key) {
      try {
        PipelineConfig::from_tree(tree).validate();
        FAIL("expected a config error for " << key);
      } catch (const ConfigError& e) {
        CHECK(e.key_path() == key);
      }
    };
    expect_key({{"align", {{"beta", -1.0}}}}, "align.beta");
    expect_key({{"align", {{"epsilon", 0.5}}}}, "align.epsilon");
    expect_key({{"align", {{"kind", "orpo"}}}}, "align.kind");
    expect_key({{"data", {{"ratio", 1.0}}}}, "data.ratio");
    expect_key({{"data", {{"bogus", 1}}}}, "data.bogus");
    expect_key({{"annotate", {{"filter_fraction", 0.0}}}}, "annotate.filter_fraction");
    expect_key({{"weak", {{"epochs", "five"}}}}, "weak.epochs");
    expect_key({{"run", {{"baseline", "oracle"}}}}, "run.baseline");
    expect_key({{"eval", {{"temperature", -0.5}}}}, "eval.temperature");
  }

  TEST_CASE("config tree round trips") {
    PipelineConfig c = small_config();
    c.annotate.filter_fraction = 0.4;
    c.baseline = Baseline::human;
    c.data.seed = 99;
    const json t = c.to_tree();
    CHECK(PipelineConfig::from_tree(t).to_tree() == t);
    CHECK(PipelineConfig::from_tree(t).data_seed() == 99);
    CHECK(PipelineConfig{}.to_tree()["align"]["beta"] == 0.5);
    CHECK(PipelineConfig{}.to_tree()["align"]["epsilon"] == 0.1);
    CHECK(PipelineConfig{}.to_tree()["align"]["epochs"] == 5);
    CHECK(PipelineConfig{}.to_tree()["sft"]["epochs"] == 3);
    CHECK(PipelineConfig{}.to_tree()["weak"]["epochs"] == 5);
    CHECK(PipelineConfig{}.to_tree()["data"]["ratio"] == 0.3);
  }

  TEST_CASE("filter_top_fraction examples") {
    const auto ten = with_confidences({0.1, 0.9, 0.3, 0.5, 0.2, 0.8, 0.4, 0.7, 0.6, 0.05});
    const auto top = filter_top_fraction(ten, 0.3);
    REQUIRE(top.size() == 3);
    CHECK(top[0].confidence == 0.9);
    CHECK(top[1].confidence == 0.8);
    CHECK(top[2].confidence == 0.7);
    CHECK(filter_top_fraction(ten, 1.0) == ten);

    const auto flat = with_confidences(std::vector<double>(10, 0.5));
    const auto firsts = filter_top_fraction(flat, 0.45);
    REQUIRE(firsts.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(firsts[i] == flat[i]);

    CHECK_THROWS_AS(filter_top_fraction(ten, 0.0), ArgumentError);
    CHECK_THROWS_AS(filter_top_fraction(ten, 1.5), ArgumentError);
    CHECK_THROWS_AS(filter_top_fraction(std::vector<AnnotatedTriplet>{}, 0.5), ArgumentError);
  }

  TEST_CASE("filter survivors dominate the removed items") {
    Rng rng(4);
    for (int k = 0; k < 200; ++k) {
      std::vector<double> cs(1 + rng.below(40));
      for (auto& c : cs) c = std::round(rng.uniform() * 6) / 6;
      const auto data = with_confidences(cs);
      const double f = 0.01 + 0.99 * rng.uniform();
      const auto kept = filter_top_fraction(data, f);
      CHECK(kept.size() == ceil_count(f, data.size()));
      double min_kept = 2, max_removed = -1;
      std::vector<bool> used(data.size());
      std::size_t j = 0;
      for (const auto& kk : kept) {
        while (!(data[j] == kk) || used[j]) ++j;
        used[j] = true;
        min_kept = std::min(min_kept, kk.confidence);
      }
      for (std::size_t i = 0; i < data.size(); ++i)
        if (!used[i]) max_removed = std::max(max_removed, data[i].confidence);
      CHECK(min_kept >= max_removed);
    }
  }

  TEST_CASE("human annotations use unit confidence") {
    const std::vector<Triplet> data = {{Prompt{{1}}, Response{{2}}, Response{{3}}},
                                       {Prompt{{1}}, Response{{4}}, Response{{5}}}};
    const std::vector<Choice> labels = {Choice::B, Choice::A};
    const auto a = annotate_with_labels(data, labels);
    CHECK(a[0].chosen_side == Choice::B);
    CHECK(a[1].chosen_side == Choice::A);
    CHECK(a[0].confidence == 1.0);
    CHECK(a[0].score_chosen == 1.0);
    CHECK(a[0].score_rejected == 0.0);
  }

  TEST_CASE("pipeline runs, resumes and reproduces") {
    test::TempDir dir("pipe_det");
    const PipelineConfig cfg = small_config();
    const RunManifest m1 = run_pipeline(cfg, dir / "a");
    REQUIRE(m1.ok());
    const RunManifest m2 = run_pipeline(cfg, dir / "b");
    REQUIRE(m2.ok());
    CHECK(slurp(dir / "a/manifest.json") == slurp(dir / "b/manifest.json"));
    CHECK(verify_manifest(dir / "a").empty());
    for (const std::string key : {"weak_annotator", "sft_policy", "reference", "aligned_policy"}) {
      CAPTURE(key);
      CHECK(m1.doc["checkpoints"][key].is_object());
    }
    CHECK(m1.doc["annotator_constructed"] == true);
    CHECK(fs::exists(dir / "a/timings.json"));
    CHECK(m1.doc.dump().find("seconds") == std::string::npos);

    // Second run in place resumes every stage.
    const RunManifest again = run_pipeline(cfg, dir / "a");
    CHECK(again.doc == m1.doc);
    const json timings = json::parse(slurp(dir / "a/timings.json"));
    for (const auto& [name, t] : timings.items()) CHECK(t["resumed"] == true);

    // Rerunning alignment alone from checkpoints reproduces it bit for bit.
    const std::string aligned = slurp(dir / "a/align/policy.ckpt");
    fs::remove_all(dir / "a/align");
    fs::remove_all(dir / "a/eval");
    run_pipeline(cfg, dir / "a");
    CHECK(slurp(dir / "a/align/policy.ckpt") == aligned);
    const json t2 = json::parse(slurp(dir / "a/timings.json"));
    CHECK(t2["sft"]["resumed"] == true);
    CHECK(t2["align"]["resumed"] == false);

    // Tampering is detected.
    std::ofstream(dir / "a/annotate/train.jsonl", std::ios::app) << "\n";
    CHECK(verify_manifest(dir / "a") == std::vector<std::string>{"annotate/train.jsonl"});
  }

  TEST_CASE("serial and parallel runs agree") {
    test::TempDir dir("pipe_exec");
    PipelineConfig cfg = small_config();
    cfg.exec = Exec::serial;
    run_pipeline(cfg, dir / "s");
    cfg.exec = Exec::parallel;
    run_pipeline(cfg, dir / "p");
    for (const std::string f : {"align/policy.ckpt", "eval/metrics.csv", "annotate/annotated.jsonl"}) {
      CAPTURE(f);
      CHECK(slurp(dir / "s" / f) == slurp(dir / "p" / f));
    }
  }

  TEST_CASE("human baseline never builds an annotator") {
    test::TempDir dir("pipe_human");
    PipelineConfig cfg = small_config();
    cfg.baseline = Baseline::human;
    const RunManifest m = run_pipeline(cfg, dir.path());
    REQUIRE(m.ok());
    CHECK(m.doc["annotator_constructed"] == false);
    CHECK(m.doc["checkpoints"]["weak_annotator"].is_null());
    CHECK_FALSE(fs::exists(dir / "weak/annotator.ckpt"));
    const auto ann = load_annotated_jsonl(dir / "annotate/annotated.jsonl", {12, 64, 64});
    const auto gold = load_labels(dir / "data/unlabeled_gold.txt");
    REQUIRE(ann.size() == gold.size());
    for (std::size_t i = 0; i < ann.size(); ++i) {
      CHECK(ann[i].chosen_side == gold[i]);
      CHECK(ann[i].confidence == 1.0);
    }
  }

  TEST_CASE("ws_dpo baseline uses implicit rewards with unit confidence") {
    test::TempDir dir("pipe_ws");
    PipelineConfig cfg = small_config();
    cfg.baseline = Baseline::ws_dpo;
    const RunManifest m = run_pipeline(cfg, dir.path());
    REQUIRE(m.ok());
    CHECK(annotator_kind(load_checkpoint(dir / "weak/annotator.ckpt")) == "implicit");
    for (const auto& a : load_annotated_jsonl(dir / "annotate/annotated.jsonl", {12, 64, 64})) {
      CHECK(a.confidence == 1.0);
    }
  }

  TEST_CASE("filtering narrows only the alignment set") {
    test::TempDir dir("pipe_filter");
    PipelineConfig cfg = small_config();
    cfg.annotate.filter_fraction = 0.25;
    REQUIRE(run_pipeline(cfg, dir.path()).ok());
    const auto all = load_annotated_jsonl(dir / "annotate/annotated.jsonl", {12, 64, 64});
    const auto train = load_annotated_jsonl(dir / "annotate/train.jsonl", {12, 64, 64});
    CHECK(train.size() == ceil_count(0.25, all.size()));
  }

  TEST_CASE("a reused annotator is copied rather than trained") {
    test::TempDir dir("pipe_reuse");
    const PipelineConfig cfg = small_config();
    REQUIRE(run_pipeline(cfg, dir / "first").ok());
    PipelineConfig reuse = cfg;
    reuse.weak.reuse = (dir / "first/weak/annotator.ckpt").string();
    REQUIRE(run_pipeline(reuse, dir / "second").ok());
    CHECK(slurp(dir / "first/annotate/annotated.jsonl") == slurp(dir / "second/annotate/annotated.jsonl"));
    CHECK(slurp(dir / "first/align/policy.ckpt") == slurp(dir / "second/align/policy.ckpt"));

    reuse.baseline = Baseline::ws_dpo;
    const RunManifest bad = run_pipeline(reuse, dir / "third");
    CHECK_FALSE(bad.ok());
    CHECK(bad.doc["failed_stage"] == "weak");
  }

  TEST_CASE("a failing stage is recorded and stops the run") {
    test::TempDir dir("pipe_fail");
    PipelineConfig cfg = small_config();
    cfg.data.source = "jsonl";
    std::ofstream(dir / "bad.jsonl") << "{\"prompt\":[1],\"response_a\":[2],\"response_b\":[3],\"label\":7}\n";
    cfg.data.path = (dir / "bad.jsonl").string();
    const RunManifest m = run_pipeline(cfg, dir / "run");
    CHECK_FALSE(m.ok());
    CHECK(m.doc["status"] == "failed");
    CHECK(m.doc["failed_stage"] == "data");
    const auto& stages = m.doc["stages"];
    CHECK(stages[0]["status"] == "failed");
    CHECK(stages[0]["error"]["kind"] == "schema");
    for (std::size_t i = 1; i < stages.size(); ++i) CHECK(stages[i]["status"] == "not_run");
    CHECK(fs::exists(dir / "run/manifest.json"));
  }

  TEST_CASE("jsonl source with a length filter") {
    test::TempDir dir("pipe_jsonl");
    PipelineConfig gen = small_config();
    const auto data = generate_data(gen);
    write_jsonl(dir / "in.jsonl", std::span<const PreferenceTriplet>(data));
    PipelineConfig cfg = small_config();
    cfg.data.source = "jsonl";
    cfg.data.path = (dir / "in.jsonl").string();
    cfg.data.max_total_length = 6;
    const auto split = split_stage(cfg, data);
    std::size_t kept = 0;
    for (const auto& t : data) {
      kept += t.prompt.tokens.size() + std::max(t.response_a.tokens.size(), t.response_b.tokens.size()) <= 6;
    }
    CHECK(split.labeled.size() + split.unlabeled.size() == kept);
    REQUIRE(run_pipeline(cfg, dir / "run").ok());
    CHECK(fs::exists(dir / "run/eval/metrics.csv"));
  }
}
