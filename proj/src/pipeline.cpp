#include "cwpo/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "cwpo/align.hpp"
#include "cwpo/annotator.hpp"
#include "cwpo/checkpoint.hpp"
#include "cwpo/errors.hpp"
#include "cwpo/jsonl.hpp"
#include "cwpo/policy.hpp"

namespace cwpo {

namespace fs = std::filesystem;
using nlohmann::json;

Baseline parse_baseline(std::string_view s) {
  if (s == "cwpo") return Baseline::cwpo;
  if (s == "ws_dpo") return Baseline::ws_dpo;
  if (s == "human") return Baseline::human;
  throw ArgumentError("unknown baseline '" + std::string(s) + "' (expected cwpo, ws_dpo or human)");
}

std::string_view to_string(Baseline b) {
  switch (b) {
    case Baseline::cwpo: return "cwpo";
    case Baseline::ws_dpo: return "ws_dpo";
    case Baseline::human: return "human";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config binding

namespace {

std::int64_t as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) {
    throw ConfigError(path, "expected an integer, got " + v.dump());
  }
  return v.get<std::int64_t>();
}

std::uint64_t as_u64(const json& v, const std::string& path) {
  std::int64_t i = as_int(v, path);
  if (i < 0) {
    throw ConfigError(path, "expected a non-negative integer, got " + v.dump());
  }
  return static_cast<std::uint64_t>(i);
}

double as_double(const json& v, const std::string& path) {
  if (!v.is_number()) {
    throw ConfigError(path, "expected a number, got " + v.dump());
  }
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) {
    throw ConfigError(path, "expected true or false, got " + v.dump());
  }
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) {
    throw ConfigError(path, "expected a string, got " + v.dump());
  }
  return v.get<std::string>();
}

// Converts library argument errors raised while parsing an enum value into
// config errors that name the key.
template <class F>
auto keyed(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ArgumentError& e) {
    throw ConfigError(path, e.what());
  }
}

struct Field {
  std::string path;
  std::function<json()> get;
  std::function<void(const json&)> set;
};

void int_field(std::vector<Field>& f, const std::string& path, int& ref) {
  f.push_back({path, [&ref] { return json(ref); }, [&ref, path](const json& v) {
                 auto i = as_int(v, path);
                 if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max()) {
                   throw ConfigError(path, "integer out of range");
                 }
                 ref = static_cast<int>(i);
               }});
}

void size_field(std::vector<Field>& f, const std::string& path, std::size_t& ref) {
  f.push_back({path, [&ref] { return json(ref); }, [&ref, path](const json& v) { ref = as_u64(v, path); }});
}

void seed_field(std::vector<Field>& f, const std::string& path, std::uint64_t& ref) {
  f.push_back({path, [&ref] { return json(ref); }, [&ref, path](const json& v) { ref = as_u64(v, path); }});
}

void double_field(std::vector<Field>& f, const std::string& path, double& ref) {
  f.push_back({path, [&ref] { return json(ref); }, [&ref, path](const json& v) { ref = as_double(v, path); }});
}

void bool_field(std::vector<Field>& f, const std::string& path, bool& ref) {
  f.push_back({path, [&ref] { return json(ref); }, [&ref, path](const json& v) { ref = as_bool(v, path); }});
}

void string_field(std::vector<Field>& f, const std::string& path, std::string& ref) {
  f.push_back({path, [&ref] { return json(ref); }, [&ref, path](const json& v) { ref = as_string(v, path); }});
}

void optim_fields(std::vector<Field>& f, const std::string& s, OptimConfig& o) {
  double_field(f, s + ".lr", o.learning_rate);
  double_field(f, s + ".beta1", o.beta1);
  double_field(f, s + ".beta2", o.beta2);
  double_field(f, s + ".eps", o.epsilon);
  double_field(f, s + ".weight_decay", o.weight_decay);
  int_field(f, s + ".warmup_steps", o.warmup_steps);
  const std::string path = s + ".schedule";
  f.push_back({path, [&o] { return json(std::string(to_string(o.schedule))); },
               [&o, path](const json& v) { o.schedule = keyed(path, [&] { return parse_schedule(as_string(v, path)); }); }});
}

void shape_fields(std::vector<Field>& f, const std::string& s, ModelShape& m) {
  int_field(f, s + ".embed_dim", m.embed_dim);
  int_field(f, s + ".mlp_dim", m.mlp_dim);
  int_field(f, s + ".block_count", m.block_count);
}

std::vector<Field> bind(PipelineConfig& c) {
  std::vector<Field> f;
  seed_field(f, "run.seed", c.seed);
  f.push_back({"run.baseline", [&c] { return json(std::string(to_string(c.baseline))); }, [&c](const json& v) {
                 c.baseline = keyed("run.baseline", [&] { return parse_baseline(as_string(v, "run.baseline")); });
               }});
  f.push_back({"run.exec", [&c] { return json(c.exec == Exec::serial ? "serial" : "parallel"); },
               [&c](const json& v) { c.exec = keyed("run.exec", [&] { return parse_exec(as_string(v, "run.exec")); }); }});

  auto& d = c.data;
  string_field(f, "data.source", d.source);
  string_field(f, "data.path", d.path);
  double_field(f, "data.ratio", d.ratio);
  f.push_back({"data.seed", [&c] { return json(c.data_seed()); },
               [&d](const json& v) { d.seed = as_u64(v, "data.seed"); }});
  size_field(f, "data.n", d.n);
  int_field(f, "data.vocab", d.vocab);
  int_field(f, "data.prompt_min", d.prompt_length.min);
  int_field(f, "data.prompt_max", d.prompt_length.max);
  int_field(f, "data.response_min", d.response_length.min);
  int_field(f, "data.response_max", d.response_length.max);
  double_field(f, "data.flip_noise", d.flip_noise);
  bool_field(f, "data.allow_duplicates", d.allow_duplicates);
  int_field(f, "data.max_total_length", d.max_total_length);
  seed_field(f, "data.gold.seed", d.gold_seed);
  double_field(f, "data.gold.target_std", d.gold_target_std);
  double_field(f, "data.gold.length_penalty", d.gold_length_penalty);
  shape_fields(f, "data.gold", d.gold_shape);

  auto& w = c.weak;
  string_field(f, "weak.kind", w.kind);
  int_field(f, "weak.epochs", w.epochs);
  int_field(f, "weak.batch_size", w.batch_size);
  shape_fields(f, "weak", w.shape);
  bool_field(f, "weak.transfer", w.transfer);
  int_field(f, "weak.sft_epochs", w.sft_epochs);
  int_field(f, "weak.dpo_epochs", w.dpo_epochs);
  double_field(f, "weak.implicit_beta", w.implicit_beta);
  string_field(f, "weak.reuse", w.reuse);
  optim_fields(f, "weak.optim", w.optim);
  optim_fields(f, "weak.sft_optim", w.sft_optim);
  optim_fields(f, "weak.dpo_optim", w.dpo_optim);

  auto& a = c.annotate;
  f.push_back({"annotate.scheme", [&a] { return json(std::string(to_string(a.scheme.kind))); },
               [&a](const json& v) {
                 a.scheme.kind =
                     keyed("annotate.scheme", [&] { return parse_confidence_scheme(as_string(v, "annotate.scheme")); })
                         .kind;
               }});
  double_field(f, "annotate.c4_scale", a.scheme.c4_scale);
  f.push_back({"annotate.filter_fraction", [&a] { return a.filter_fraction ? json(*a.filter_fraction) : json(); },
               [&a](const json& v) { a.filter_fraction = as_double(v, "annotate.filter_fraction"); }});

  auto& s = c.sft;
  int_field(f, "sft.epochs", s.epochs);
  int_field(f, "sft.batch_size", s.batch_size);
  shape_fields(f, "sft", s.shape);
  optim_fields(f, "sft.optim", s.optim);

  auto& al = c.align;
  f.push_back({"align.kind", [&al] { return json(std::string(to_string(al.loss.kind))); }, [&al](const json& v) {
                 al.loss.kind = keyed("align.kind", [&] { return parse_loss_kind(as_string(v, "align.kind")); });
               }});
  double_field(f, "align.beta", al.loss.beta);
  double_field(f, "align.epsilon", al.loss.epsilon);
  f.push_back({"align.weighting", [&al] { return json(std::string(to_string(al.loss.weighting))); },
               [&al](const json& v) {
                 al.loss.weighting =
                     keyed("align.weighting", [&] { return parse_weighting(as_string(v, "align.weighting")); });
               }});
  f.push_back({"align.reduction", [&al] { return json(std::string(to_string(al.loss.reduction))); },
               [&al](const json& v) {
                 al.loss.reduction =
                     keyed("align.reduction", [&] { return parse_reduction(as_string(v, "align.reduction")); });
               }});
  int_field(f, "align.epochs", al.epochs);
  int_field(f, "align.batch_size", al.batch_size);
  optim_fields(f, "align.optim", al.optim);

  auto& e = c.eval;
  bool_field(f, "eval.probes", e.probes);
  size_field(f, "eval.prompts", e.prompts);
  double_field(f, "eval.temperature", e.gen.temperature);
  int_field(f, "eval.max_new", e.gen.max_new);
  f.push_back({"eval.seed", [&c] { return json(c.eval_seed()); },
               [&e](const json& v) { e.seed = as_u64(v, "eval.seed"); }});
  int_field(f, "eval.histogram_bins", e.histogram_bins);
  return f;
}

void flatten(const json& node, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (const auto& [k, v] : node.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, path, out);
    } else {
      out.emplace_back(path, v);
    }
  }
}

}  // namespace

PipelineConfig PipelineConfig::from_tree(const json& tree) {
  PipelineConfig c;
  if (!tree.is_object()) {
    throw ConfigError("<root>", "config must be a table");
  }
  auto fields = bind(c);
  std::map<std::string, const Field*> index;
  for (const auto& f : fields) {
    index[f.path] = &f;
  }
  std::vector<std::pair<std::string, json>> flat;
  flatten(tree, "", flat);
  for (const auto& [path, v] : flat) {
    auto it = index.find(path);
    if (it == index.end()) {
      throw ConfigError(path, "unknown key");
    }
    if (v.is_null()) {
      continue;
    }
    it->second->set(v);
  }
  c.validate();
  return c;
}

json PipelineConfig::to_tree() const {
  PipelineConfig copy = *this;
  json tree = json::object();
  for (const auto& f : bind(copy)) {
    json value = f.get();
    if (value.is_null()) {
      continue;
    }
    json* node = &tree;
    std::stringstream ss(f.path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) {
      parts.push_back(part);
    }
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = value;
  }
  return tree;
}

namespace {

void require(bool ok, const std::string& path, const std::string& msg) {
  if (!ok) {
    throw ConfigError(path, msg);
  }
}

void validate_optim(const OptimConfig& o, const std::string& s) {
  require(o.learning_rate > 0.0, s + ".lr", "must be positive");
  require(o.beta1 >= 0.0 && o.beta1 < 1.0, s + ".beta1", "must lie in [0, 1)");
  require(o.beta2 >= 0.0 && o.beta2 < 1.0, s + ".beta2", "must lie in [0, 1)");
  require(o.epsilon > 0.0, s + ".eps", "must be positive");
  require(o.weight_decay >= 0.0, s + ".weight_decay", "must be non-negative");
  require(o.warmup_steps >= 0, s + ".warmup_steps", "must be non-negative");
}

void validate_shape(const ModelShape& m, const std::string& s) {
  require(m.embed_dim >= 1, s + ".embed_dim", "must be at least 1");
  require(m.mlp_dim >= 1, s + ".mlp_dim", "must be at least 1");
  require(m.block_count >= 1, s + ".block_count", "must be at least 1");
}

}  // namespace

void PipelineConfig::validate() const {
  require(data.source == "synthetic" || data.source == "jsonl", "data.source", "expected synthetic or jsonl");
  require(data.source != "jsonl" || !data.path.empty(), "data.path", "required when data.source = \"jsonl\"");
  require(data.ratio > 0.0 && data.ratio < 1.0, "data.ratio", "must lie in (0, 1)");
  require(data.n >= 1, "data.n", "must be at least 1");
  require(data.vocab >= 1, "data.vocab", "must be at least 1");
  require(data.prompt_length.min >= 1, "data.prompt_min", "must be at least 1");
  require(data.prompt_length.max >= data.prompt_length.min, "data.prompt_max", "must be >= data.prompt_min");
  require(data.response_length.min >= 1, "data.response_min", "must be at least 1");
  require(data.response_length.max >= data.response_length.min, "data.response_max",
          "must be >= data.response_min");
  require(data.flip_noise >= 0.0 && data.flip_noise < 0.5, "data.flip_noise", "must lie in [0, 0.5)");
  require(data.max_total_length >= 0, "data.max_total_length", "must be non-negative");
  require(data.gold_target_std > 0.0, "data.gold.target_std", "must be positive");
  validate_shape(data.gold_shape, "data.gold");

  require(weak.kind == "bt" || weak.kind == "pairwise", "weak.kind", "expected bt or pairwise");
  require(weak.epochs >= 0, "weak.epochs", "must be non-negative");
  require(weak.batch_size >= 1, "weak.batch_size", "must be at least 1");
  require(weak.sft_epochs >= 0, "weak.sft_epochs", "must be non-negative");
  require(weak.dpo_epochs >= 0, "weak.dpo_epochs", "must be non-negative");
  require(weak.implicit_beta > 0.0, "weak.implicit_beta", "must be positive");
  validate_shape(weak.shape, "weak");
  validate_optim(weak.optim, "weak.optim");
  validate_optim(weak.sft_optim, "weak.sft_optim");
  validate_optim(weak.dpo_optim, "weak.dpo_optim");

  require(annotate.scheme.c4_scale > 0.0, "annotate.c4_scale", "must be positive");
  if (annotate.filter_fraction) {
    require(*annotate.filter_fraction > 0.0 && *annotate.filter_fraction <= 1.0, "annotate.filter_fraction",
            "must lie in (0, 1]");
  }

  require(sft.epochs >= 0, "sft.epochs", "must be non-negative");
  require(sft.batch_size >= 1, "sft.batch_size", "must be at least 1");
  validate_shape(sft.shape, "sft");
  validate_optim(sft.optim, "sft.optim");

  require(align.loss.beta > 0.0, "align.beta", "must be positive");
  require(align.loss.epsilon >= 0.0 && align.loss.epsilon < 0.5, "align.epsilon", "must lie in [0, 0.5)");
  require(align.epochs >= 0, "align.epochs", "must be non-negative");
  require(align.batch_size >= 1, "align.batch_size", "must be at least 1");
  validate_optim(align.optim, "align.optim");

  require(eval.prompts >= 1, "eval.prompts", "must be at least 1");
  require(eval.gen.temperature >= 0.0, "eval.temperature", "must be non-negative");
  require(eval.gen.max_new >= 1, "eval.max_new", "must be at least 1");
  require(eval.histogram_bins >= 1, "eval.histogram_bins", "must be at least 1");
}

GoldRewardSpec PipelineConfig::gold_spec() const {
  GoldRewardSpec g;
  g.seed = data.gold_seed;
  g.arch.vocab_size = data.vocab;
  g.arch.max_length = data.prompt_length.max + 1 + data.response_length.max;
  g.arch.embed_dim = data.gold_shape.embed_dim;
  g.arch.mlp_dim = data.gold_shape.mlp_dim;
  g.arch.block_count = data.gold_shape.block_count;
  g.target_std = data.gold_target_std;
  g.length_penalty = data.gold_length_penalty;
  return g;
}

SynthConfig PipelineConfig::synth_config() const {
  SynthConfig s;
  s.n = data.n;
  s.vocab = data.vocab;
  s.prompt_length = data.prompt_length;
  s.response_length = data.response_length;
  s.seed = data_seed();
  s.flip_noise = data.flip_noise;
  s.allow_duplicates = data.allow_duplicates;
  return s;
}

ArchConfig PipelineConfig::policy_arch() const {
  ArchConfig a;
  a.vocab_size = data.vocab;
  a.max_length = data.prompt_length.max + 1 + data.response_length.max;
  a.embed_dim = sft.shape.embed_dim;
  a.mlp_dim = sft.shape.mlp_dim;
  a.block_count = sft.shape.block_count;
  return a;
}

ArchConfig PipelineConfig::weak_arch() const {
  ArchConfig a;
  a.vocab_size = data.vocab;
  a.max_length = weak.kind == "pairwise" ? data.prompt_length.max + 2 * data.response_length.max + 6
                                         : data.prompt_length.max + 1 + data.response_length.max;
  a.embed_dim = weak.shape.embed_dim;
  a.mlp_dim = weak.shape.mlp_dim;
  a.block_count = weak.shape.block_count;
  return a;
}

// ---------------------------------------------------------------------------
// Filtering and label-based annotation

std::vector<AnnotatedTriplet> filter_top_fraction(std::span<const AnnotatedTriplet> data, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ArgumentError("filter fraction must lie in (0, 1]");
  }
  if (data.empty()) {
    throw ArgumentError("filter_top_fraction needs a non-empty dataset");
  }
  const std::size_t keep = ceil_count(fraction, data.size());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data[a].confidence > data[b].confidence; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  std::vector<AnnotatedTriplet> out;
  out.reserve(keep);
  for (std::size_t i : order) {
    out.push_back(data[i]);
  }
  return out;
}

std::vector<AnnotatedTriplet> annotate_with_labels(std::span<const Triplet> data, std::span<const Choice> labels) {
  if (data.size() != labels.size()) {
    throw ArgumentError("label count does not match triplet count");
  }
  std::vector<AnnotatedTriplet> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.push_back({data[i], labels[i], 1.0, 1.0, 0.0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hashing

std::string sha256_bytes(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_bytes(ss.str());
}

// ---------------------------------------------------------------------------
// Stage bodies

std::uint64_t PipelineConfig::stream_seed(SeedStream s) const {
  std::uint64_t base = seed;
  if (s == SeedStream::split) {
    base = data_seed();
  } else if (s == SeedStream::eval_prompts || s == SeedStream::eval_sampling) {
    base = eval_seed();
  }
  return derive_seed(base, static_cast<std::uint64_t>(s));
}

json trace_to_json(const TrainTrace& t) {
  json epochs = json::array();
  for (const auto& e : t.epochs) {
    json j = {{"epoch", e.epoch}, {"loss", e.loss}};
    if (e.heldout_agreement) j["heldout_agreement"] = *e.heldout_agreement;
    if (e.mean_margin) j["mean_margin"] = *e.mean_margin;
    epochs.push_back(j);
  }
  return {{"epochs", epochs}, {"steps", t.steps}};
}

namespace {

std::vector<Triplet> as_triplets(std::span<const PreferenceTriplet> rows) {
  std::vector<Triplet> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    out.push_back(r.unlabeled());
  }
  return out;
}

std::vector<SftPair> chosen_pairs(std::span<const AnnotatedTriplet> data) {
  std::vector<SftPair> out;
  out.reserve(data.size());
  for (const auto& t : data) {
    out.push_back({t.prompt(), t.chosen()});
  }
  return out;
}

std::vector<SftPair> labeled_pairs(std::span<const PreferenceTriplet> data) {
  std::vector<SftPair> out;
  out.reserve(data.size());
  for (const auto& t : data) {
    if (!t.human_label) {
      throw ArgumentError("weak training requires labeled triplets");
    }
    out.push_back({t.prompt, t.response(*t.human_label)});
  }
  return out;
}

}  // namespace

std::vector<PreferenceTriplet> generate_data(const PipelineConfig& cfg) {
  return synth_generate(cfg.gold_spec(), cfg.synth_config());
}

DatasetSplit split_stage(const PipelineConfig& cfg, std::vector<PreferenceTriplet> all) {
  if (cfg.data.max_total_length > 0) {
    std::erase_if(all, [&](const PreferenceTriplet& t) {
      return t.prompt.tokens.size() + std::max(t.response_a.tokens.size(), t.response_b.tokens.size()) >
             static_cast<std::size_t>(cfg.data.max_total_length);
    });
  }
  if (all.empty()) {
    throw ArgumentError("dataset is empty after loading and length filtering");
  }
  return split_dataset(all, cfg.data.ratio, cfg.stream_seed(SeedStream::split));
}

WeakStageResult train_weak_stage(const PipelineConfig& cfg, std::span<const PreferenceTriplet> labeled) {
  const ArchConfig arch = cfg.weak_arch();
  const auto& w = cfg.weak;
  WeakStageResult out;
  out.trace = json::object();

  std::optional<PolicyModel> weak_policy;
  if (cfg.baseline == Baseline::ws_dpo || w.transfer) {
    weak_policy = PolicyModel::create(arch, cfg.stream_seed(SeedStream::weak_policy_init));
    TrainOptions to{w.sft_epochs, w.batch_size, cfg.stream_seed(SeedStream::weak_policy_train), cfg.exec};
    TrainTrace t = sft_train(*weak_policy, labeled_pairs(labeled), w.sft_optim, to);
    out.trace["weak_sft"] = trace_to_json(t);
    out.weak_sft = policy_checkpoint(*weak_policy, cfg.seed, t.steps);
  }

  if (cfg.baseline == Baseline::ws_dpo) {
    const ReferenceSnapshot weak_sft = snapshot_reference(*weak_policy);
    std::vector<Choice> labels;
    for (const auto& t : labeled) {
      labels.push_back(*t.human_label);
    }
    const auto annotated = annotate_with_labels(as_triplets(labeled), labels);
    LossConfig loss;
    loss.kind = LossKind::dpo;
    loss.beta = w.implicit_beta;
    loss.weighting = Weighting::unit;
    AlignOptions ao;
    ao.epochs = w.dpo_epochs;
    ao.batch_size = w.batch_size;
    ao.seed = cfg.stream_seed(SeedStream::weak_dpo_train);
    ao.exec = cfg.exec;
    TrainTrace t = align_policy(*weak_policy, weak_sft, annotated, loss, w.dpo_optim, ao);
    out.trace["weak_dpo"] = trace_to_json(t);
    out.annotator = annotator_checkpoint(*weak_policy, weak_sft, w.implicit_beta, cfg.seed, t.steps);
    return out;
  }

  TrainOptions to{w.epochs, w.batch_size, cfg.stream_seed(SeedStream::annotator_train), cfg.exec};
  if (w.kind == "bt") {
    WeakAnnotator annotator = WeakAnnotator::create(arch, cfg.stream_seed(SeedStream::annotator_init));
    if (weak_policy) {
      transfer_backbone(*weak_policy, annotator.model);
    }
    TrainTrace t = train_weak_bt(annotator, labeled, w.optim, to);
    out.trace["annotator"] = trace_to_json(t);
    out.annotator = annotator_checkpoint(annotator, cfg.seed, t.steps);
  } else {
    PairwiseAnnotator annotator = PairwiseAnnotator::create(arch, cfg.stream_seed(SeedStream::annotator_init));
    if (weak_policy) {
      transfer_backbone(*weak_policy, annotator.model);
    }
    TrainTrace t = train_weak_pairwise(annotator, labeled, w.optim, to);
    out.trace["annotator"] = trace_to_json(t);
    out.annotator = annotator_checkpoint(annotator, cfg.seed, t.steps);
  }
  return out;
}

std::vector<AnnotatedTriplet> annotate_stage(const PipelineConfig& cfg, const Checkpoint& annotator,
                                             std::span<const Triplet> unlabeled) {
  const std::string kind = annotator_kind(annotator);
  if (kind == "implicit") {
    ImplicitAnnotator a = implicit_annotator_from_checkpoint(annotator);
    return implicit_annotate_all(a.weak_policy, a.weak_sft, unlabeled, a.beta, {ConfidenceKind::unit, 0.2},
                                 cfg.exec);
  }
  if (kind == "pairwise") {
    return pairwise_annotate_all(pairwise_annotator_from_checkpoint(annotator), unlabeled, cfg.exec);
  }
  return annotate_all(bt_annotator_from_checkpoint(annotator), unlabeled, cfg.annotate.scheme, cfg.exec);
}

PolicyStageResult sft_stage(const PipelineConfig& cfg, std::span<const AnnotatedTriplet> annotated) {
  PolicyStageResult out{PolicyModel::create(cfg.policy_arch(), cfg.stream_seed(SeedStream::sft_init)), {}};
  TrainOptions to{cfg.sft.epochs, cfg.sft.batch_size, cfg.stream_seed(SeedStream::sft_train), cfg.exec};
  out.trace = trace_to_json(sft_train(out.policy, chosen_pairs(annotated), cfg.sft.optim, to));
  return out;
}

std::vector<Prompt> eval_prompts(const PipelineConfig& cfg, std::span<const Triplet> unlabeled) {
  if (cfg.data.source == "synthetic") {
    return synth_prompts(cfg.synth_config(), cfg.eval.prompts, cfg.stream_seed(SeedStream::eval_prompts));
  }
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < unlabeled.size() && out.size() < cfg.eval.prompts; ++i) {
    out.push_back(unlabeled[i].prompt);
  }
  if (out.empty()) {
    throw ArgumentError("no unlabeled prompts available for evaluation");
  }
  return out;
}

PolicyStageResult align_stage(const PipelineConfig& cfg, const ReferenceSnapshot& reference,
                              std::span<const AnnotatedTriplet> train) {
  PolicyStageResult out{reference.model(), {}};
  AlignOptions ao;
  ao.epochs = cfg.align.epochs;
  ao.batch_size = cfg.align.batch_size;
  ao.seed = cfg.stream_seed(SeedStream::align_train);
  ao.exec = cfg.exec;
  json probes = json::array();
  std::optional<GoldReward> gold;
  std::vector<Prompt> prompts;
  if (cfg.eval.probes) {
    if (cfg.data.source != "synthetic") {
      throw ConfigError("eval.probes", "probes need synthetic evaluation prompts");
    }
    gold.emplace(cfg.gold_spec());
    prompts = eval_prompts(cfg, {});
    ao.probe = [&](int epoch, const PolicyModel& current) {
      auto m = gold_reward_accuracy(current, reference, prompts, *gold, cfg.eval.gen,
                                    cfg.stream_seed(SeedStream::eval_sampling), nullptr, cfg.exec);
      probes.push_back({{"epoch", epoch}, {"gold_reward_accuracy", *m.value}});
    };
  }
  out.trace = trace_to_json(align_policy(out.policy, reference, train, cfg.align.loss, cfg.align.optim, ao));
  if (cfg.eval.probes) {
    out.trace["probes"] = probes;
  }
  return out;
}

EvalStageResult eval_stage(const PipelineConfig& cfg, const PolicyModel& aligned, const ReferenceSnapshot& reference,
                           std::span<const Prompt> prompts, std::span<const AnnotatedTriplet> annotated,
                           std::span<const Choice> gold_labels, std::span<const AnnotatedTriplet> train) {
  EvalStageResult out;
  const GoldReward gold(cfg.gold_spec());
  const std::uint64_t sampling = cfg.stream_seed(SeedStream::eval_sampling);
  out.metrics.push_back(
      gold_reward_accuracy(aligned, reference, prompts, gold, cfg.eval.gen, sampling, &out.rewards, cfg.exec));
  out.metrics.push_back(win_rate(aligned, reference.model(), prompts, gold, cfg.eval.gen, sampling, cfg.exec));

  double gap_sum = 0.0;
  for (const auto& r : out.rewards) {
    gap_sum += r.gap();
  }
  MetricReport gap;
  gap.name = "mean_reward_gap";
  gap.value = gap_sum / static_cast<double>(out.rewards.size());
  gap.n = out.rewards.size();
  out.metrics.push_back(gap);

  if (!annotated.empty() && !gold_labels.empty()) {
    out.metrics.push_back(annotator_agreement(annotated, EvaluationChannel{{gold_labels.begin(), gold_labels.end()}}));
  }
  if (!train.empty()) {
    MetricReport conf;
    conf.name = "mean_confidence";
    double sum = 0.0;
    for (const auto& t : train) {
      sum += t.confidence;
    }
    conf.value = sum / static_cast<double>(train.size());
    conf.n = train.size();
    out.metrics.push_back(conf);
  }
  for (auto& m : out.metrics) {
    m.seed = cfg.seed;
  }
  out.histogram = confidence_histogram(annotated, cfg.eval.histogram_bins);
  return out;
}

std::vector<std::string> write_eval_outputs(const fs::path& dir, const EvalStageResult& result) {
  fs::create_directories(dir);
  write_metrics_csv(dir / "metrics.csv", result.metrics);
  write_metrics_json(dir / "metrics.json", result.metrics);
  write_histogram_csv(dir / "confidence_hist.csv", result.histogram);
  write_reward_gaps_csv(dir / "reward_gaps.csv", result.rewards);
  return {"metrics.csv", "metrics.json", "confidence_hist.csv", "reward_gaps.csv"};
}

// ---------------------------------------------------------------------------
// Stage runner

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot read " + path.string());
  }
  return json::parse(in);
}

// Every stage reads its inputs back from the run directory, so a resumed
// stage sees exactly what a fresh run would.
class Runner {
 public:
  Runner(const PipelineConfig& cfg, fs::path root) : cfg_(cfg), root_(std::move(root)) {}

  RunManifest run();

 private:
  // Runs `body` unless a previous run left a record with the same inputs and
  // intact outputs. Returns a digest of the outputs for downstream inputs.
  std::string stage(const std::string& name, const json& inputs,
                    const std::function<std::vector<std::string>()>& body);

  fs::path at(const std::string& rel) const { return root_ / rel; }
  TokenLimits limits() const { return {cfg_.data.vocab, cfg_.data.prompt_length.max, cfg_.data.response_length.max}; }
  std::vector<Triplet> unlabeled() const {
    return as_triplets(load_jsonl(at("data/unlabeled.jsonl"), Schema::unlabeled, limits()));
  }
  ReferenceSnapshot reference() const {
    return snapshot_reference(
        policy_from_checkpoint(load_checkpoint(at("reference/reference.ckpt")), cfg_.policy_arch()));
  }

  std::vector<std::string> run_data();
  std::vector<std::string> run_weak();
  std::vector<std::string> run_annotate();
  std::vector<std::string> run_sft();
  std::vector<std::string> run_reference();
  std::vector<std::string> run_align();
  std::vector<std::string> run_eval();

  const PipelineConfig& cfg_;
  fs::path root_;
  json stages_ = json::object();
  json timings_ = json::object();
};

std::string Runner::stage(const std::string& name, const json& inputs,
                          const std::function<std::vector<std::string>()>& body) {
  const std::string input_hash = sha256_bytes(inputs.dump());
  const fs::path record_path = at(name + "/stage.json");
  const auto start = std::chrono::steady_clock::now();
  bool resumed = false;
  json record;
  if (fs::exists(record_path)) {
    try {
      json prev = read_json(record_path);
      bool valid = prev.value("input_hash", "") == input_hash && prev.contains("outputs");
      if (valid) {
        for (const auto& [rel, sha] : prev["outputs"].items()) {
          if (!fs::exists(at(rel)) || sha256_file(at(rel)) != sha.get<std::string>()) {
            valid = false;
            break;
          }
        }
      }
      if (valid) {
        record = prev;
        resumed = true;
      }
    } catch (const std::exception&) {
      resumed = false;
    }
  }
  if (resumed) {
    if (auto log = spdlog::get("cwpo")) log->info("stage {}: outputs up to date, skipping", name);
  } else {
    if (auto log = spdlog::get("cwpo")) log->info("stage {}: running", name);
    fs::remove(record_path);
    fs::create_directories(at(name));
    json outputs = json::object();
    for (const auto& rel : body()) {
      outputs[rel] = sha256_file(at(rel));
    }
    record = {{"stage", name}, {"input_hash", input_hash}, {"outputs", outputs}};
    write_json(record_path, record);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  timings_[name] = {{"seconds", seconds}, {"resumed", resumed}};
  stages_[name] = {{"status", "complete"}, {"input_hash", input_hash}, {"outputs", record["outputs"]}};
  return sha256_bytes(record["outputs"].dump());
}

std::vector<std::string> Runner::run_data() {
  std::vector<std::string> outputs;
  std::vector<PreferenceTriplet> all;
  if (cfg_.data.source == "synthetic") {
    all = generate_data(cfg_);
    write_jsonl(at("data/all.jsonl"), std::span<const PreferenceTriplet>(all));
    outputs.push_back("data/all.jsonl");
  } else {
    all = load_jsonl(cfg_.data.path, Schema::labeled, limits());
  }
  const DatasetSplit split = split_stage(cfg_, std::move(all));
  write_jsonl(at("data/labeled.jsonl"), std::span<const PreferenceTriplet>(split.labeled));
  write_jsonl(at("data/unlabeled.jsonl"), std::span<const Triplet>(split.unlabeled));
  write_labels(at("data/unlabeled_gold.txt"), split.evaluation.gold_labels);
  write_json(at("data/gold_reward.json"), cfg_.gold_spec().to_json());
  outputs.insert(outputs.end(),
                 {"data/labeled.jsonl", "data/unlabeled.jsonl", "data/unlabeled_gold.txt", "data/gold_reward.json"});
  return outputs;
}

std::vector<std::string> Runner::run_weak() {
  if (!cfg_.weak.reuse.empty()) {
    Checkpoint ckpt = load_checkpoint(cfg_.weak.reuse);
    const std::string kind = annotator_kind(ckpt);
    const std::string expected = cfg_.baseline == Baseline::ws_dpo ? "implicit" : cfg_.weak.kind;
    if (kind != expected) {
      throw ConfigError("weak.reuse", "checkpoint holds a '" + kind + "' annotator, expected '" + expected + "'");
    }
    save_checkpoint(at("weak/annotator.ckpt"), ckpt);
    write_json(at("weak/trace.json"), {{"reused", true}});
    return {"weak/annotator.ckpt", "weak/trace.json"};
  }
  const auto labeled = load_jsonl(at("data/labeled.jsonl"), Schema::labeled, limits());
  WeakStageResult r = train_weak_stage(cfg_, labeled);
  std::vector<std::string> outputs = {"weak/annotator.ckpt", "weak/trace.json"};
  save_checkpoint(at("weak/annotator.ckpt"), r.annotator);
  write_json(at("weak/trace.json"), r.trace);
  if (r.weak_sft) {
    save_checkpoint(at("weak/weak_sft.ckpt"), *r.weak_sft);
    outputs.push_back("weak/weak_sft.ckpt");
  }
  return outputs;
}

std::vector<std::string> Runner::run_annotate() {
  std::vector<AnnotatedTriplet> annotated;
  if (cfg_.baseline == Baseline::human) {
    annotated = annotate_with_labels(unlabeled(), load_labels(at("data/unlabeled_gold.txt")));
  } else {
    annotated = annotate_stage(cfg_, load_checkpoint(at("weak/annotator.ckpt")), unlabeled());
  }
  write_annotated_jsonl(at("annotate/annotated.jsonl"), annotated);
  const auto train =
      cfg_.annotate.filter_fraction ? filter_top_fraction(annotated, *cfg_.annotate.filter_fraction) : annotated;
  write_annotated_jsonl(at("annotate/train.jsonl"), train);
  return {"annotate/annotated.jsonl", "annotate/train.jsonl"};
}

std::vector<std::string> Runner::run_sft() {
  // SFT sees every annotated pair; filtering only narrows the alignment set.
  PolicyStageResult r = sft_stage(cfg_, load_annotated_jsonl(at("annotate/annotated.jsonl"), limits()));
  save_checkpoint(at("sft/policy.ckpt"), policy_checkpoint(r.policy, cfg_.seed, r.trace["steps"].get<int>()));
  write_json(at("sft/trace.json"), r.trace);
  return {"sft/policy.ckpt", "sft/trace.json"};
}

std::vector<std::string> Runner::run_reference() {
  Checkpoint ckpt = load_checkpoint(at("sft/policy.ckpt"));
  const ReferenceSnapshot ref = snapshot_reference(policy_from_checkpoint(ckpt, cfg_.policy_arch()));
  Checkpoint out = policy_checkpoint(ref.model(), cfg_.seed, ckpt.meta.value("step", 0));
  out.meta["role"] = "reference";
  save_checkpoint(at("reference/reference.ckpt"), out);
  return {"reference/reference.ckpt"};
}

std::vector<std::string> Runner::run_align() {
  PolicyStageResult r = align_stage(cfg_, reference(), load_annotated_jsonl(at("annotate/train.jsonl"), limits()));
  save_checkpoint(at("align/policy.ckpt"), policy_checkpoint(r.policy, cfg_.seed, r.trace["steps"].get<int>()));
  write_json(at("align/trace.json"), r.trace);
  return {"align/policy.ckpt", "align/trace.json"};
}

std::vector<std::string> Runner::run_eval() {
  const PolicyModel aligned = policy_from_checkpoint(load_checkpoint(at("align/policy.ckpt")), cfg_.policy_arch());
  const auto prompts = eval_prompts(cfg_, unlabeled());
  const auto annotated = load_annotated_jsonl(at("annotate/annotated.jsonl"), limits());
  const auto gold_labels = load_labels(at("data/unlabeled_gold.txt"));
  const auto train = load_annotated_jsonl(at("annotate/train.jsonl"), limits());
  const EvalStageResult r = eval_stage(cfg_, aligned, reference(), prompts, annotated, gold_labels, train);
  std::vector<std::string> outputs;
  for (const auto& name : write_eval_outputs(at("eval"), r)) {
    outputs.push_back("eval/" + name);
  }
  return outputs;
}

RunManifest Runner::run() {
  fs::create_directories(root_);
  const json tree = cfg_.to_tree();
  json manifest = {
      {"format", "cwpo-manifest/1"},
      {"baseline", std::string(to_string(cfg_.baseline))},
      {"config", tree},
      {"seeds", {{"run", cfg_.seed}, {"data", cfg_.data_seed()}, {"eval", cfg_.eval_seed()}}},
      {"timings", "timings.json"},
  };
  const std::vector<std::string> order = {"data", "weak", "annotate", "sft", "reference", "align", "eval"};
  std::string current;
  try {
    current = "data";
    json data_inputs = {{"data", tree["data"]}};
    if (cfg_.data.source == "jsonl") {
      data_inputs["source_sha256"] = sha256_file(cfg_.data.path);
    }
    const std::string data = stage("data", data_inputs, [&] { return run_data(); });

    current = "weak";
    std::string weak = "skipped";
    if (cfg_.baseline == Baseline::human) {
      stages_["weak"] = {{"status", "skipped"}};
    } else {
      json inputs = {{"weak", tree["weak"]}, {"run", tree["run"]}, {"data", data}};
      if (!cfg_.weak.reuse.empty()) {
        inputs["reuse_sha256"] = sha256_file(cfg_.weak.reuse);
      }
      weak = stage("weak", inputs, [&] { return run_weak(); });
    }

    current = "annotate";
    const std::string annotate =
        stage("annotate", {{"annotate", tree["annotate"]}, {"run", tree["run"]}, {"data", data}, {"weak", weak}},
              [&] { return run_annotate(); });
    current = "sft";
    const std::string sft = stage("sft", {{"sft", tree["sft"]}, {"run", tree["run"]}, {"annotate", annotate}},
                                  [&] { return run_sft(); });
    current = "reference";
    const std::string reference = stage("reference", {{"sft", sft}}, [&] { return run_reference(); });
    current = "align";
    json align_inputs = {{"align", tree["align"]}, {"run", tree["run"]}, {"annotate", annotate},
                         {"reference", reference}};
    if (cfg_.eval.probes) {
      align_inputs["probes"] = {{"eval", tree["eval"]}, {"data", tree["data"]}};
    }
    const std::string align = stage("align", align_inputs, [&] { return run_align(); });
    current = "eval";
    stage("eval",
          {{"eval", tree["eval"]}, {"data", tree["data"]}, {"run", tree["run"]}, {"data_outputs", data},
           {"annotate", annotate}, {"reference", reference}, {"align", align}},
          [&] { return run_eval(); });
    current.clear();
    manifest["status"] = "complete";
  } catch (const std::exception& e) {
    const auto* err = dynamic_cast<const Error*>(&e);
    if (auto log = spdlog::get("cwpo")) log->error("stage {} failed: {}", current, e.what());
    manifest["status"] = "failed";
    manifest["failed_stage"] = current;
    stages_[current] = {{"status", "failed"},
                        {"error", {{"kind", err ? err->kind() : "internal"}, {"message", e.what()}}}};
    bool downstream = false;
    for (const auto& s : order) {
      if (downstream && !stages_.contains(s)) {
        stages_[s] = {{"status", "not_run"}};
      }
      downstream = downstream || s == current;
    }
  }
  json ordered = json::array();
  for (const auto& s : order) {
    if (stages_.contains(s)) {
      json entry = stages_[s];
      entry["name"] = s;
      ordered.push_back(entry);
    }
  }
  manifest["stages"] = ordered;
  manifest["annotator_constructed"] =
      stages_.contains("weak") && stages_["weak"].value("status", "") == "complete";

  auto artifact = [&](const std::string& stage_name, const std::string& rel) -> json {
    if (stages_.contains(stage_name) && stages_[stage_name].contains("outputs") &&
        stages_[stage_name]["outputs"].contains(rel)) {
      return {{"path", rel}, {"sha256", stages_[stage_name]["outputs"][rel]}};
    }
    return nullptr;
  };
  manifest["datasets"] = {{"labeled", artifact("data", "data/labeled.jsonl")},
                          {"unlabeled", artifact("data", "data/unlabeled.jsonl")},
                          {"unlabeled_gold", artifact("data", "data/unlabeled_gold.txt")},
                          {"annotated", artifact("annotate", "annotate/annotated.jsonl")},
                          {"train", artifact("annotate", "annotate/train.jsonl")}};
  manifest["checkpoints"] = {{"weak_sft", artifact("weak", "weak/weak_sft.ckpt")},
                             {"weak_annotator", artifact("weak", "weak/annotator.ckpt")},
                             {"sft_policy", artifact("sft", "sft/policy.ckpt")},
                             {"reference", artifact("reference", "reference/reference.ckpt")},
                             {"aligned_policy", artifact("align", "align/policy.ckpt")}};
  manifest["metrics"] = {{"csv", artifact("eval", "eval/metrics.csv")},
                         {"json", artifact("eval", "eval/metrics.json")},
                         {"confidence_histogram", artifact("eval", "eval/confidence_hist.csv")},
                         {"reward_gaps", artifact("eval", "eval/reward_gaps.csv")}};
  write_json(at("manifest.json"), manifest);
  write_json(at("timings.json"), timings_);
  return {manifest};
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  Runner runner(cfg, out_dir);
  return runner.run();
}

std::vector<std::string> verify_manifest(const fs::path& out_dir) {
  const json manifest = read_json(out_dir / "manifest.json");
  std::vector<std::string> bad;
  for (const auto& s : manifest.at("stages")) {
    if (!s.contains("outputs")) {
      continue;
    }
    for (const auto& [rel, sha] : s["outputs"].items()) {
      const fs::path p = out_dir / rel;
      if (!fs::exists(p) || sha256_file(p) != sha.get<std::string>()) {
        bad.push_back(rel);
      }
    }
  }
  return bad;
}

}  // namespace cwpo
