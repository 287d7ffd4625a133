#include "cwpo/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <ostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cwpo/annotator.hpp"
#include "cwpo/checkpoint.hpp"
#include "cwpo/config.hpp"
#include "cwpo/errors.hpp"
#include "cwpo/gradsuite.hpp"
#include "cwpo/jsonl.hpp"
#include "cwpo/pipeline.hpp"

namespace cwpo {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Command-line flags that override config keys. Precedence is
// flag > config file > built-in default.
class Overrides {
 public:
  explicit Overrides(CLI::App* cmd) : cmd_(cmd) {}

  // `display` replaces the default shown in --help when the default is
  // derived rather than fixed.
  void add(const std::string& flag, const std::string& key, const std::string& desc,
           const std::string& display = "") {
    static const json defaults = PipelineConfig{}.to_tree();
    Item& item = items_.emplace_back();
    item.key = key;
    item.flag = flag;
    const json* node = lookup(defaults, key);
    std::string shown = display;
    if (shown.empty() && node != nullptr) {
      shown = node->is_string() ? node->get<std::string>() : render(*node);
    }
    CLI::Option* opt = cmd_->add_option(flag, item.value, desc);
    opt->type_name(type_of(key, node));
    if (!shown.empty()) {
      opt->default_str(shown);
    }
    item.option = opt;
  }

  void add_config_path() { cmd_->add_option("--config", config_path_, "Config file (TOML subset)"); }

  PipelineConfig resolve(const std::vector<std::string>& sets = {}) const {
    json tree = config_path_.empty() ? json::object() : parse_config_file(config_path_);
    static const json defaults = PipelineConfig{}.to_tree();
    auto apply = [&](const std::string& key, const std::string& raw, const std::string& origin) {
      const json* def = lookup(defaults, key);
      json value;
      if (key == "annotate.filter_fraction") {
        value = number(raw, key, origin, false);
      } else if (def == nullptr) {
        throw ConfigError(key, "unknown key (" + origin + ")");
      } else if (def->is_boolean()) {
        if (raw != "true" && raw != "false") {
          throw ConfigError(key, "expected true or false for " + origin + ", got '" + raw + "'");
        }
        value = raw == "true";
      } else if (def->is_number_integer() || def->is_number_unsigned()) {
        value = number(raw, key, origin, true);
      } else if (def->is_number()) {
        value = number(raw, key, origin, false);
      } else {
        value = raw;
      }
      json* node = &tree;
      std::stringstream ss(key);
      std::string part;
      std::vector<std::string> parts;
      while (std::getline(ss, part, '.')) {
        parts.push_back(part);
      }
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        node = &(*node)[parts[i]];
      }
      (*node)[parts.back()] = value;
    };
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(s, "--set expects key=value");
      }
      apply(s.substr(0, eq), s.substr(eq + 1), "--set");
    }
    for (const auto& item : items_) {
      if (item.option->count() > 0) {
        apply(item.key, item.value, item.flag);
      }
    }
    return PipelineConfig::from_tree(tree);
  }

 private:
  struct Item {
    std::string flag;
    std::string key;
    std::string value;
    CLI::Option* option = nullptr;
  };

  static const json* lookup(const json& tree, const std::string& key) {
    const json* node = &tree;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!node->is_object() || !node->contains(part)) {
        return nullptr;
      }
      node = &(*node)[part];
    }
    return node;
  }

  static std::string type_of(const std::string& key, const json* node) {
    if (key == "annotate.filter_fraction") {
      return "FLOAT";
    }
    if (node == nullptr || node->is_string()) {
      return key == "data.seed" || key == "eval.seed" ? "UINT" : "TEXT";
    }
    if (node->is_boolean()) {
      return "BOOL";
    }
    if (node->is_number_unsigned()) {
      return "UINT";
    }
    return node->is_number_integer() ? "INT" : "FLOAT";
  }

  static std::string render(const json& v) {
    if (v.is_number_float()) {
      return format_double(v.get<double>());
    }
    return v.dump();
  }

  static json number(const std::string& raw, const std::string& key, const std::string& origin, bool integer) {
    try {
      std::size_t used = 0;
      if (integer) {
        long long v = std::stoll(raw, &used);
        if (used == raw.size()) {
          return v;
        }
      } else {
        double v = std::stod(raw, &used);
        if (used == raw.size()) {
          return v;
        }
      }
    } catch (const std::exception&) {
    }
    throw ConfigError(key, std::string("expected ") + (integer ? "an integer" : "a number") + " for " + origin +
                               ", got '" + raw + "'");
  }

  CLI::App* cmd_;
  std::deque<Item> items_;
  std::string config_path_;
};

void add_run_flags(Overrides& o) {
  o.add_config_path();
  o.add("--seed", "run.seed", "Seed for every random stream of the command");
  o.add("--exec", "run.exec", "Kernel execution: serial or parallel");
}

void add_shape_flags(Overrides& o) {
  o.add("--vocab", "data.vocab", "Vocabulary size");
  o.add("--prompt-max", "data.prompt_max", "Maximum prompt length");
  o.add("--response-max", "data.response_max", "Maximum response length");
}

void add_gold_flags(Overrides& o) {
  o.add("--gold-seed", "data.gold.seed", "Seed of the gold reward network");
  o.add("--gold-std", "data.gold.target_std", "Calibrated standard deviation of gold scores");
  o.add("--length-penalty", "data.gold.length_penalty", "Gold reward penalty per response token");
}

TokenLimits limits_of(const PipelineConfig& c) {
  return {c.data.vocab, c.data.prompt_length.max, c.data.response_length.max};
}

std::vector<Triplet> as_triplets(const std::vector<PreferenceTriplet>& rows) {
  std::vector<Triplet> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    out.push_back(r.unlabeled());
  }
  return out;
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw IoError("cannot write " + path.string());
  }
  f << j.dump(2) << '\n';
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
}

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("cwpo");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("CWPO_LOG");
  const std::string level = env ? env : "error";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    throw ConfigError("CWPO_LOG", "expected error, info or debug, got '" + level + "'");
  }
}

json error_json(const std::string& kind, const std::string& message, int code) {
  return {{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Confidence-weighted preference optimization toolkit", "cwpo"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");
  app.get_formatter()->column_width(32);

  std::deque<Overrides> overrides;
  auto command = [&](const std::string& name, const std::string& desc) {
    CLI::App* c = app.add_subcommand(name, desc);
    overrides.emplace_back(c);
    add_run_flags(overrides.back());
    return std::pair<CLI::App*, Overrides*>{c, &overrides.back()};
  };

  auto emit = [&](const PipelineConfig& cfg) {
    out << json{{"event", "config"}, {"config", cfg.to_tree()}}.dump() << '\n';
  };
  auto result = [&](json j) {
    j["event"] = "result";
    out << j.dump() << '\n';
  };

  // gen-data
  std::string gen_out;
  std::string gen_gold_out;
  auto [gen, gen_o] = command("gen-data", "Generate a labeled synthetic preference dataset");
  gen->add_option("--out", gen_out, "Output JSONL path")->required();
  gen->add_option("--gold-out", gen_gold_out, "Write the gold reward spec (JSON) here");
  gen_o->add("--n", "data.n", "Number of triplets");
  gen_o->add("--data-seed", "data.seed", "Generator seed", "run.seed");
  add_shape_flags(*gen_o);
  gen_o->add("--prompt-min", "data.prompt_min", "Minimum prompt length");
  gen_o->add("--response-min", "data.response_min", "Minimum response length");
  gen_o->add("--flip-noise", "data.flip_noise", "Label flip probability in [0, 0.5)");
  gen_o->add("--allow-duplicates", "data.allow_duplicates", "Permit identical candidate responses");
  add_gold_flags(*gen_o);

  // split
  std::string split_in, split_labeled, split_unlabeled, split_gold;
  auto [split, split_o] = command("split", "Split labeled data into labeled / unlabeled sides");
  split->add_option("--in", split_in, "Labeled JSONL input")->required();
  split->add_option("--labeled-out", split_labeled, "Labeled side (JSONL)")->required();
  split->add_option("--unlabeled-out", split_unlabeled, "Unlabeled side (JSONL, labels removed)")->required();
  split->add_option("--gold-out", split_gold, "Gold labels of the unlabeled side (one 0/1 per line)")->required();
  split_o->add("--ratio", "data.ratio", "Labeled fraction in (0, 1)");
  split_o->add("--data-seed", "data.seed", "Shuffle seed", "run.seed");
  split_o->add("--max-total-length", "data.max_total_length", "Drop triplets longer than this (0 = keep all)");
  add_shape_flags(*split_o);

  // train-weak
  std::string weak_in, weak_out, weak_trace, weak_sft_out;
  auto [weak, weak_o] = command("train-weak", "Train a weak annotator on labeled triplets");
  weak->add_option("--labeled", weak_in, "Labeled JSONL input")->required();
  weak->add_option("--out", weak_out, "Annotator checkpoint output")->required();
  weak->add_option("--trace", weak_trace, "Training trace (JSON) output");
  weak->add_option("--weak-sft-out", weak_sft_out, "Weak SFT policy checkpoint output, when one is trained");
  weak_o->add("--kind", "weak.kind", "Annotator: bt, pairwise or implicit");
  weak_o->add("--epochs", "weak.epochs", "Annotator epochs");
  weak_o->add("--batch-size", "weak.batch_size", "Mini-batch size");
  weak_o->add("--lr", "weak.optim.lr", "Annotator learning rate");
  weak_o->add("--embed-dim", "weak.embed_dim", "Embedding width");
  weak_o->add("--mlp-dim", "weak.mlp_dim", "MLP width");
  weak_o->add("--transfer", "weak.transfer", "Initialize the backbone from a weak SFT policy (true/false)");
  weak_o->add("--sft-epochs", "weak.sft_epochs", "Weak SFT epochs");
  weak_o->add("--dpo-epochs", "weak.dpo_epochs", "Weak DPO epochs (implicit annotator)");
  weak_o->add("--implicit-beta", "weak.implicit_beta", "Implicit reward beta");
  add_shape_flags(*weak_o);

  // annotate
  std::string ann_ckpt, ann_in, ann_out, ann_gold, ann_hist;
  auto [ann, ann_o] = command("annotate", "Annotate unlabeled triplets with a weak annotator");
  ann->add_option("--annotator", ann_ckpt, "Annotator checkpoint")->required();
  ann->add_option("--in", ann_in, "Unlabeled JSONL input")->required();
  ann->add_option("--out", ann_out, "Annotated JSONL output")->required();
  ann->add_option("--gold-labels", ann_gold, "Gold labels; reports agreement when given");
  ann->add_option("--histogram", ann_hist, "Confidence histogram CSV output");
  ann_o->add("--scheme", "annotate.scheme", "Confidence scheme: c1, c2, c3, c4, pairwise or unit");
  ann_o->add("--c4-scale", "annotate.c4_scale", "Scale of the c4 scheme");
  ann_o->add("--bins", "eval.histogram_bins", "Histogram bins");
  add_shape_flags(*ann_o);

  // filter
  std::string filt_in, filt_out;
  auto [filt, filt_o] = command("filter", "Keep the most confident fraction of annotated triplets");
  filt->add_option("--in", filt_in, "Annotated JSONL input")->required();
  filt->add_option("--out", filt_out, "Annotated JSONL output")->required();
  filt_o->add("--fraction", "annotate.filter_fraction", "Fraction in (0, 1] to keep", "1");
  add_shape_flags(*filt_o);

  // sft
  std::string sft_in, sft_out, sft_trace;
  auto [sft, sft_o] = command("sft", "Supervised fine-tuning on annotated chosen responses");
  sft->add_option("--in", sft_in, "Annotated JSONL input")->required();
  sft->add_option("--out", sft_out, "Policy checkpoint output")->required();
  sft->add_option("--trace", sft_trace, "Training trace (JSON) output");
  sft_o->add("--epochs", "sft.epochs", "Epochs");
  sft_o->add("--batch-size", "sft.batch_size", "Mini-batch size");
  sft_o->add("--lr", "sft.optim.lr", "Learning rate");
  sft_o->add("--embed-dim", "sft.embed_dim", "Embedding width");
  sft_o->add("--mlp-dim", "sft.mlp_dim", "MLP width");
  add_shape_flags(*sft_o);

  // align
  std::string al_in, al_ref, al_out, al_trace;
  auto [al, al_o] = command("align", "Align a policy with a (confidence-weighted) preference loss");
  al->add_option("--in", al_in, "Annotated JSONL input")->required();
  al->add_option("--reference", al_ref, "Reference (SFT) policy checkpoint; also the starting point")->required();
  al->add_option("--out", al_out, "Aligned policy checkpoint output")->required();
  al->add_option("--trace", al_trace, "Training trace (JSON) output");
  al_o->add("--loss", "align.kind", "Loss: dpo, ipo or rdpo");
  al_o->add("--beta", "align.beta", "Loss beta");
  al_o->add("--epsilon", "align.epsilon", "rDPO flip rate in [0, 0.5)");
  al_o->add("--weighting", "align.weighting", "confidence or unit");
  al_o->add("--reduction", "align.reduction", "mean or sum");
  al_o->add("--epochs", "align.epochs", "Epochs");
  al_o->add("--batch-size", "align.batch_size", "Mini-batch size");
  al_o->add("--lr", "align.optim.lr", "Learning rate");
  al_o->add("--warmup-steps", "align.optim.warmup_steps", "Linear warmup steps");
  add_shape_flags(*al_o);

  // eval
  std::string ev_aligned, ev_ref, ev_out, ev_ann, ev_gold, ev_unlabeled;
  auto [ev, ev_o] = command("eval", "Gold reward accuracy, win rate and annotation metrics");
  ev->add_option("--aligned", ev_aligned, "Aligned policy checkpoint")->required();
  ev->add_option("--reference", ev_ref, "Reference (SFT) policy checkpoint")->required();
  ev->add_option("--out-dir", ev_out, "Directory for metric files")->required();
  ev->add_option("--annotated", ev_ann, "Annotated JSONL (agreement and histogram)");
  ev->add_option("--gold-labels", ev_gold, "Gold labels matching --annotated");
  ev->add_option("--unlabeled", ev_unlabeled, "Unlabeled JSONL supplying prompts when data.source = jsonl");
  ev_o->add("--prompts", "eval.prompts", "Number of evaluation prompts");
  ev_o->add("--temperature", "eval.temperature", "Sampling temperature (0 = greedy)");
  ev_o->add("--max-new", "eval.max_new", "Maximum generated tokens");
  ev_o->add("--eval-seed", "eval.seed", "Seed of prompts and sampling", "run.seed");
  ev_o->add("--bins", "eval.histogram_bins", "Histogram bins");
  ev_o->add("--source", "data.source", "Prompt source: synthetic or jsonl");
  add_shape_flags(*ev_o);
  add_gold_flags(*ev_o);

  // pipeline
  std::string pipe_out;
  std::vector<std::string> pipe_sets;
  auto [pipe, pipe_o] = command("pipeline", "Run every stage end to end with a manifest");
  pipe->add_option("--out", pipe_out, "Run directory")->required();
  pipe->add_option("--set", pipe_sets, "Override any config key (key=value), repeatable");
  pipe_o->add("--baseline", "run.baseline", "cwpo, ws_dpo or human");

  // grad-check
  GradCheckSettings gc;
  double gc_tol = 1e-4;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of a loss gradient");
  grad->add_option("--loss", gc.loss, "Loss: dpo, ipo, rdpo, cw_dpo, cw_ipo, cw_rdpo, bt, pairwise or sft")
      ->capture_default_str();
  grad->add_option("--beta", gc.beta, "Loss beta")->capture_default_str();
  grad->add_option("--epsilon", gc.epsilon, "rDPO flip rate")->capture_default_str();
  grad->add_option("--batch", gc.batch, "Examples per batch")->capture_default_str();
  grad->add_option("--probes", gc.probes, "Probed coordinates per seed")->capture_default_str();
  grad->add_option("--seeds", gc.seeds, "Independent seeds")->capture_default_str();
  grad->add_option("--step", gc.step, "Central-difference step")->capture_default_str();
  grad->add_option("--tolerance", gc_tol, "Pass threshold on max relative error")->capture_default_str();
  grad->add_option("--seed", gc.seed, "Base seed")->capture_default_str();

  // Optional flags without a value default still show one in --help.
  for (CLI::App* sub : app.get_subcommands({})) {
    for (CLI::Option* opt : sub->get_options()) {
      if (!opt->check_lname("help") && !opt->check_lname("help-all") && !opt->get_required() && opt->get_default_str().empty()) {
        opt->default_str("none");
      }
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << error_json("usage", e.what(), 2).dump() << '\n';
    err << app.help();
    return 2;
  }

  try {
    configure_logging();
  } catch (const Error& e) {
    err << error_json(e.kind(), e.what(), e.exit_code()).dump() << '\n';
    spdlog::drop("cwpo");
    return e.exit_code();
  }
  struct DropLogger {
    ~DropLogger() { spdlog::drop("cwpo"); }
  } drop_logger;

  try {
    if (gen->parsed()) {
      const PipelineConfig cfg = gen_o->resolve();
      emit(cfg);
      const auto data = generate_data(cfg);
      ensure_parent(gen_out);
      write_jsonl(fs::path(gen_out), std::span<const PreferenceTriplet>(data));
      if (!gen_gold_out.empty()) {
        write_json_file(gen_gold_out, cfg.gold_spec().to_json());
      }
      result({{"command", "gen-data"}, {"rows", data.size()}, {"out", gen_out}});
    } else if (split->parsed()) {
      const PipelineConfig cfg = split_o->resolve();
      emit(cfg);
      const DatasetSplit s = split_stage(cfg, load_jsonl(split_in, Schema::labeled, limits_of(cfg)));
      for (const auto& p : {split_labeled, split_unlabeled, split_gold}) {
        ensure_parent(p);
      }
      write_jsonl(fs::path(split_labeled), std::span<const PreferenceTriplet>(s.labeled));
      write_jsonl(fs::path(split_unlabeled), std::span<const Triplet>(s.unlabeled));
      write_labels(split_gold, s.evaluation.gold_labels);
      result({{"command", "split"}, {"labeled", s.labeled.size()}, {"unlabeled", s.unlabeled.size()}});
    } else if (weak->parsed()) {
      const auto* kind_opt = weak->get_option("--kind");
      const bool implicit = kind_opt->count() > 0 && kind_opt->as<std::string>() == "implicit";
      PipelineConfig cfg;
      if (implicit) {
        std::vector<std::string> forced = {"run.baseline=ws_dpo"};
        // --kind implicit is not a weak.kind value; route it to the baseline.
        Overrides& o = *weak_o;
        const_cast<CLI::Option*>(kind_opt)->clear();
        cfg = o.resolve(forced);
      } else {
        cfg = weak_o->resolve();
      }
      emit(cfg);
      const auto labeled = load_jsonl(weak_in, Schema::labeled, limits_of(cfg));
      WeakStageResult r = train_weak_stage(cfg, labeled);
      ensure_parent(weak_out);
      save_checkpoint(weak_out, r.annotator);
      if (!weak_trace.empty()) {
        write_json_file(weak_trace, r.trace);
      }
      if (!weak_sft_out.empty() && r.weak_sft) {
        ensure_parent(weak_sft_out);
        save_checkpoint(weak_sft_out, *r.weak_sft);
      }
      result({{"command", "train-weak"}, {"annotator_kind", annotator_kind(r.annotator)}, {"trace", r.trace}});
    } else if (ann->parsed()) {
      const PipelineConfig cfg = ann_o->resolve();
      emit(cfg);
      const auto unlabeled = as_triplets(load_jsonl(ann_in, Schema::unlabeled, limits_of(cfg)));
      const auto annotated = annotate_stage(cfg, load_checkpoint(ann_ckpt), unlabeled);
      ensure_parent(ann_out);
      write_annotated_jsonl(fs::path(ann_out), annotated);
      json r = {{"command", "annotate"}, {"rows", annotated.size()}};
      if (!ann_gold.empty()) {
        r["agreement"] = annotator_agreement(annotated, EvaluationChannel{load_labels(ann_gold)}).to_json();
      }
      if (!ann_hist.empty()) {
        ensure_parent(ann_hist);
        write_histogram_csv(ann_hist, confidence_histogram(annotated, cfg.eval.histogram_bins));
      }
      result(r);
    } else if (filt->parsed()) {
      const PipelineConfig cfg = filt_o->resolve();
      emit(cfg);
      const auto data = load_annotated_jsonl(filt_in, limits_of(cfg));
      const auto kept = filter_top_fraction(data, cfg.annotate.filter_fraction.value_or(1.0));
      ensure_parent(filt_out);
      write_annotated_jsonl(fs::path(filt_out), kept);
      result({{"command", "filter"}, {"rows_in", data.size()}, {"rows_out", kept.size()}});
    } else if (sft->parsed()) {
      const PipelineConfig cfg = sft_o->resolve();
      emit(cfg);
      PolicyStageResult r = sft_stage(cfg, load_annotated_jsonl(sft_in, limits_of(cfg)));
      ensure_parent(sft_out);
      save_checkpoint(sft_out, policy_checkpoint(r.policy, cfg.seed, r.trace["steps"].get<int>()));
      if (!sft_trace.empty()) {
        write_json_file(sft_trace, r.trace);
      }
      result({{"command", "sft"}, {"trace", r.trace}});
    } else if (al->parsed()) {
      const PipelineConfig cfg = al_o->resolve();
      emit(cfg);
      const ReferenceSnapshot ref = snapshot_reference(policy_from_checkpoint(load_checkpoint(al_ref)));
      PolicyStageResult r = align_stage(cfg, ref, load_annotated_jsonl(al_in, limits_of(cfg)));
      ensure_parent(al_out);
      save_checkpoint(al_out, policy_checkpoint(r.policy, cfg.seed, r.trace["steps"].get<int>()));
      if (!al_trace.empty()) {
        write_json_file(al_trace, r.trace);
      }
      result({{"command", "align"}, {"trace", r.trace}});
    } else if (ev->parsed()) {
      const PipelineConfig cfg = ev_o->resolve();
      emit(cfg);
      const PolicyModel aligned = policy_from_checkpoint(load_checkpoint(ev_aligned));
      const ReferenceSnapshot ref = snapshot_reference(policy_from_checkpoint(load_checkpoint(ev_ref), aligned.arch()));
      std::vector<Triplet> unlabeled;
      if (!ev_unlabeled.empty()) {
        unlabeled = as_triplets(load_jsonl(ev_unlabeled, Schema::unlabeled, limits_of(cfg)));
      }
      std::vector<AnnotatedTriplet> annotated;
      if (!ev_ann.empty()) {
        annotated = load_annotated_jsonl(ev_ann, limits_of(cfg));
      }
      std::vector<Choice> gold;
      if (!ev_gold.empty()) {
        if (ev_ann.empty()) {
          throw ArgumentError("--gold-labels needs --annotated");
        }
        gold = load_labels(ev_gold);
      }
      const auto prompts = eval_prompts(cfg, unlabeled);
      const EvalStageResult r = eval_stage(cfg, aligned, ref, prompts, annotated, gold, annotated);
      write_eval_outputs(ev_out, r);
      json metrics = json::array();
      for (const auto& m : r.metrics) {
        metrics.push_back(m.to_json());
      }
      result({{"command", "eval"}, {"metrics", metrics}});
    } else if (pipe->parsed()) {
      const PipelineConfig cfg = pipe_o->resolve(pipe_sets);
      emit(cfg);
      const RunManifest m = run_pipeline(cfg, pipe_out);
      if (!m.ok()) {
        const auto& stages = m.doc["stages"];
        json error = nullptr;
        for (const auto& s : stages) {
          if (s.value("status", "") == "failed") {
            error = s["error"];
          }
        }
        err << json{{"error",
                     {{"kind", error.is_null() ? "internal" : error["kind"]},
                      {"message", error.is_null() ? "pipeline failed" : error["message"]},
                      {"stage", m.doc.value("failed_stage", "")},
                      {"exit_code", 1}}}}
                   .dump()
            << '\n';
        return 1;
      }
      result({{"command", "pipeline"}, {"manifest", (fs::path(pipe_out) / "manifest.json").string()}});
    } else if (grad->parsed()) {
      out << json{{"event", "config"},
                  {"config",
                   {{"loss", gc.loss}, {"beta", gc.beta}, {"epsilon", gc.epsilon}, {"batch", gc.batch},
                    {"probes", gc.probes}, {"seeds", gc.seeds}, {"step", gc.step}, {"tolerance", gc_tol},
                    {"seed", gc.seed}}}}
                 .dump()
          << '\n';
      const GradSuiteReport r = run_grad_check(gc);
      const bool pass = r.max_rel_err < gc_tol;
      result({{"command", "grad-check"}, {"loss", gc.loss}, {"max_rel_err", r.max_rel_err},
              {"per_seed", r.per_seed}, {"probes", r.probes_total}, {"pass", pass}});
      return pass ? 0 : 1;
    }
  } catch (const Error& e) {
    err << error_json(e.kind(), e.what(), e.exit_code()).dump() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    err << error_json("parse", e.what(), 1).dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << error_json("internal", e.what(), 1).dump() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace cwpo
