#include <doctest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cwpo/cli.hpp"
#include "cwpo/jsonl.hpp"
#include "helpers.hpp"

using namespace cwpo;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

std::vector<json> lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help matches the snapshots") {
    const std::filesystem::path golden = CWPO_TEST_GOLDEN;
    const Outcome top = run({"--help"});
    CHECK(top.code == 0);
    CHECK(top.out == slurp(golden / "cwpo.txt"));
    for (const char* cmd :
         {"gen-data", "split", "train-weak", "annotate", "filter", "sft", "align", "eval", "pipeline", "grad-check"}) {
      const std::string name = cmd;
      CAPTURE(name);
      const Outcome h = run({name, "--help"});
      CHECK(h.code == 0);
      CHECK(h.out == slurp(golden / (name + ".txt")));
    }
  }

  TEST_CASE("usage errors exit with 2") {
    const Outcome unknown = run({"frobnicate"});
    CHECK(unknown.code == 2);
    CHECK(lines(unknown.err.substr(0, unknown.err.find('\n') + 1))[0]["error"]["kind"] == "usage");

    const Outcome missing = run({"filter", "--in", "x.jsonl"});
    CHECK(missing.code == 2);
    CHECK(missing.out.empty());
  }

  TEST_CASE("config errors exit with 2 and name the key") {
    test::TempDir dir("cli_cfg");
    std::ofstream(dir / "run.toml") << "[align]\nbeta = -1.0\n";
    const Outcome bad = run({"align", "--config", (dir / "run.toml").string(), "--in", "a", "--reference", "b",
                             "--out", (dir / "c").string()});
    CHECK(bad.code == 2);
    const json e = json::parse(bad.err)["error"];
    CHECK(e["kind"] == "config");
    CHECK(e["message"].get<std::string>().find("align.beta") != std::string::npos);

    const Outcome flag = run({"pipeline", "--out", (dir / "r").string(), "--set", "align.nope=1"});
    CHECK(flag.code == 2);
    CHECK(json::parse(flag.err)["error"]["message"].get<std::string>().find("align.nope") != std::string::npos);
  }

  TEST_CASE("runtime errors exit with 1 and a JSON diagnostic") {
    test::TempDir dir("cli_rt");
    const Outcome r = run({"filter", "--in", (dir / "absent.jsonl").string(), "--out", (dir / "o.jsonl").string()});
    CHECK(r.code == 1);
    const json e = json::parse(r.err)["error"];
    CHECK(e["kind"] == "io");
    CHECK(e["exit_code"] == 1);
  }

  TEST_CASE("filter keeps the requested fraction") {
    test::TempDir dir("cli_filter");
    Rng rng(8);
    std::vector<AnnotatedTriplet> rows(100);
    for (auto& a : rows) {
      a.source = test::random_triplet(rng, 8);
      a.confidence = rng.uniform();
    }
    write_annotated_jsonl(dir / "in.jsonl", rows);
    const Outcome r = run({"filter", "--in", (dir / "in.jsonl").string(), "--out", (dir / "out.jsonl").string(),
                           "--fraction", "0.3", "--vocab", "8"});
    REQUIRE(r.code == 0);
    const auto out = lines(r.out);
    REQUIRE(out.size() == 2);
    CHECK(out[0]["event"] == "config");
    CHECK(out[1]["rows_out"] == 30);
    CHECK(load_annotated_jsonl(dir / "out.jsonl", {8, 64, 64}).size() == 30);
  }

  TEST_CASE("grad-check passes for cw_rdpo") {
    const Outcome r = run({"grad-check", "--loss", "cw_rdpo", "--epsilon", "0.1"});
    CHECK(r.code == 0);
    const auto out = lines(r.out);
    REQUIRE(out.size() == 2);
    CHECK(out[0]["config"]["epsilon"] == 0.1);
    CHECK(out[1]["pass"] == true);
    CHECK(out[1]["max_rel_err"].get<double>() < 1e-4);
  }

  TEST_CASE("flags override the config file which overrides defaults") {
    test::TempDir dir("cli_prec");
    std::ofstream(dir / "run.toml") << "[run]\nseed = 5\n[data]\nn = 50\nvocab = 10\n";
    const std::string cfg = (dir / "run.toml").string();
    const Outcome r = run({"gen-data", "--config", cfg, "--seed", "9", "--out", (dir / "d.jsonl").string()});
    REQUIRE(r.code == 0);
    const json c = lines(r.out)[0]["config"];
    CHECK(c["run"]["seed"] == 9);
    CHECK(c["data"]["n"] == 50);
    CHECK(c["data"]["vocab"] == 10);
    CHECK(c["data"]["ratio"] == 0.3);
    CHECK(lines(r.out)[1]["rows"] == 50);

    // Same seed, same data.
    const Outcome again = run({"gen-data", "--config", cfg, "--seed", "9", "--out", (dir / "e.jsonl").string()});
    REQUIRE(again.code == 0);
    CHECK(slurp(dir / "d.jsonl") == slurp(dir / "e.jsonl"));
  }

  TEST_CASE("stage commands chain into a run") {
    test::TempDir dir("cli_chain");
    auto p = [&](const char* name) { return (dir / name).string(); };
    const std::vector<std::string> small = {"--seed", "4"};
    auto with = [&](std::vector<std::string> args) {
      args.insert(args.end(), small.begin(), small.end());
      return run(args);
    };
    std::ofstream(dir / "run.toml") << "[data]\nn = 120\nvocab = 10\n[eval]\nprompts = 10\n";
    const std::string cfg = p("run.toml");
    REQUIRE(with({"gen-data", "--config", cfg, "--out", p("all.jsonl")}).code == 0);
    REQUIRE(with({"split", "--config", cfg, "--in", p("all.jsonl"), "--labeled-out", p("l.jsonl"), "--unlabeled-out",
                  p("u.jsonl"), "--gold-out", p("g.txt")})
                .code == 0);
    REQUIRE(with({"train-weak", "--config", cfg, "--labeled", p("l.jsonl"), "--out", p("w.ckpt"), "--epochs", "1"})
                .code == 0);
    const Outcome ann = with({"annotate", "--config", cfg, "--annotator", p("w.ckpt"), "--in", p("u.jsonl"), "--out",
                              p("a.jsonl"), "--gold-labels", p("g.txt")});
    REQUIRE(ann.code == 0);
    CHECK(lines(ann.out)[1]["rows"] == 84);
    REQUIRE(with({"sft", "--config", cfg, "--in", p("a.jsonl"), "--out", p("s.ckpt"), "--epochs", "1"}).code == 0);
    REQUIRE(with({"align", "--config", cfg, "--in", p("a.jsonl"), "--reference", p("s.ckpt"), "--out", p("p.ckpt"),
                  "--epochs", "1"})
                .code == 0);
    const Outcome ev = with({"eval", "--config", cfg, "--aligned", p("p.ckpt"), "--reference", p("s.ckpt"),
                             "--out-dir", p("ev")});
    REQUIRE(ev.code == 0);
    CHECK(std::filesystem::exists(dir / "ev/metrics.csv"));
  }
}
