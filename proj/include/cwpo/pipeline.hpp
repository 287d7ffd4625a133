#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwpo/checkpoint.hpp"
#include "cwpo/confidence.hpp"
#include "cwpo/eval.hpp"
#include "cwpo/kernels.hpp"
#include "cwpo/losses.hpp"
#include "cwpo/network.hpp"
#include "cwpo/optim.hpp"
#include "cwpo/policy.hpp"
#include "cwpo/prefdata.hpp"
#include "cwpo/synth.hpp"

namespace cwpo {

enum class Baseline { cwpo, ws_dpo, human };
Baseline parse_baseline(std::string_view s);
std::string_view to_string(Baseline b);

inline OptimConfig cosine_optim(double lr) {
  OptimConfig o;
  o.learning_rate = lr;
  o.schedule = Schedule::cosine;
  return o;
}

// Independent random streams of a run, derived from run.seed (data.seed for
// split, eval.seed for evaluation prompts and sampling).
enum class SeedStream : std::uint64_t {
  split = 1,
  weak_policy_init = 10,
  weak_policy_train = 11,
  weak_dpo_train = 12,
  annotator_init = 13,
  annotator_train = 14,
  sft_init = 20,
  sft_train = 21,
  align_train = 30,
  eval_prompts = 40,
  eval_sampling = 41,
};

struct ModelShape {
  int embed_dim = 16;
  int mlp_dim = 32;
  int block_count = 1;
};

struct DataSection {
  std::string source = "synthetic";  // synthetic | jsonl
  std::string path;                  // jsonl source, labeled schema
  double ratio = 0.3;
  std::optional<std::uint64_t> seed;  // defaults to run.seed
  std::size_t n = 2000;
  int vocab = 32;
  LengthRange prompt_length{4, 6};
  LengthRange response_length{6, 6};
  double flip_noise = 0.1;
  bool allow_duplicates = false;
  // Drops triplets whose prompt plus longer response exceed this many tokens
  // (0 keeps everything).
  int max_total_length = 0;
  std::uint64_t gold_seed = 1234;
  double gold_target_std = 2.0;
  double gold_length_penalty = 0.0;
  ModelShape gold_shape{16, 32, 1};
};

struct WeakSection {
  std::string kind = "bt";  // bt | pairwise
  int epochs = 5;
  int batch_size = 16;
  OptimConfig optim = cosine_optim(3e-3);
  ModelShape shape{16, 32, 1};
  // Initialize the annotator backbone from a weak policy fine-tuned on the
  // labeled chosen responses.
  bool transfer = true;
  int sft_epochs = 3;
  OptimConfig sft_optim = cosine_optim(3e-3);
  // WS-DPO weak policy: DPO epochs on the labeled set and implicit-reward β.
  int dpo_epochs = 3;
  double implicit_beta = 0.5;
  OptimConfig dpo_optim = cosine_optim(1e-3);
  // Existing annotator checkpoint to reuse instead of training one.
  std::string reuse;
};

struct AnnotateSection {
  ConfidenceScheme scheme;
  std::optional<double> filter_fraction;
};

struct SftSection {
  int epochs = 3;
  int batch_size = 16;
  OptimConfig optim = cosine_optim(3e-3);
  ModelShape shape{32, 64, 1};
};

struct AlignSection {
  LossConfig loss;
  int epochs = 5;
  int batch_size = 16;
  OptimConfig optim = cosine_optim(1e-3);
};

struct EvalSection {
  bool probes = false;
  std::size_t prompts = 200;
  GenSettings gen;
  std::optional<std::uint64_t> seed;  // defaults to run.seed
  int histogram_bins = 10;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  Baseline baseline = Baseline::cwpo;
  Exec exec = Exec::parallel;
  DataSection data;
  WeakSection weak;
  AnnotateSection annotate;
  SftSection sft;
  AlignSection align;
  EvalSection eval;

  // Config tree (as produced by parse_config) layered over the defaults.
  // Unknown keys and bad values raise ConfigError with the key path.
  static PipelineConfig from_tree(const nlohmann::json& tree);
  // Fully resolved tree; from_tree(to_tree()) reproduces the config.
  nlohmann::json to_tree() const;
  void validate() const;

  std::uint64_t data_seed() const { return data.seed.value_or(seed); }
  std::uint64_t eval_seed() const { return eval.seed.value_or(seed); }
  std::uint64_t stream_seed(SeedStream s) const;
  GoldRewardSpec gold_spec() const;
  SynthConfig synth_config() const;
  // Architectures derived from data lengths and the model shapes.
  ArchConfig policy_arch() const;
  ArchConfig weak_arch() const;
};

// The ⌈fraction·N⌉ most confident items; ties favour the lower index and the
// survivors keep their input order.
std::vector<AnnotatedTriplet> filter_top_fraction(std::span<const AnnotatedTriplet> data, double fraction);

// Human-baseline annotation: gold label becomes the chosen side with unit
// confidence and indicator scores 1/0.
std::vector<AnnotatedTriplet> annotate_with_labels(std::span<const Triplet> data, std::span<const Choice> labels);

// Stage bodies shared by the pipeline and the per-stage CLI commands.

std::vector<PreferenceTriplet> generate_data(const PipelineConfig& cfg);
// Applies the length filter, then splits with the split stream.
DatasetSplit split_stage(const PipelineConfig& cfg, std::vector<PreferenceTriplet> all);

struct WeakStageResult {
  Checkpoint annotator;
  std::optional<Checkpoint> weak_sft;
  nlohmann::json trace;
};
// Trains the annotator selected by cfg: bt or pairwise (optionally with
// backbone transfer from a weak SFT policy), or the implicit-reward annotator
// when baseline = ws_dpo.
WeakStageResult train_weak_stage(const PipelineConfig& cfg, std::span<const PreferenceTriplet> labeled);
// Dispatches on the checkpoint's annotator_kind. Implicit annotators use unit
// confidence and pairwise annotators the pairwise scheme; bt uses cfg's scheme.
std::vector<AnnotatedTriplet> annotate_stage(const PipelineConfig& cfg, const Checkpoint& annotator,
                                             std::span<const Triplet> unlabeled);

struct PolicyStageResult {
  PolicyModel policy;
  nlohmann::json trace;
};
PolicyStageResult sft_stage(const PipelineConfig& cfg, std::span<const AnnotatedTriplet> annotated);
PolicyStageResult align_stage(const PipelineConfig& cfg, const ReferenceSnapshot& reference,
                              std::span<const AnnotatedTriplet> train);

std::vector<Prompt> eval_prompts(const PipelineConfig& cfg, std::span<const Triplet> unlabeled);

struct EvalStageResult {
  std::vector<MetricReport> metrics;
  std::vector<RewardPair> rewards;
  std::vector<HistogramBin> histogram;
};
// GRA and win rate of `aligned` against the reference; annotation agreement
// and confidence statistics when annotations (and gold labels) are given.
EvalStageResult eval_stage(const PipelineConfig& cfg, const PolicyModel& aligned, const ReferenceSnapshot& reference,
                           std::span<const Prompt> prompts, std::span<const AnnotatedTriplet> annotated,
                           std::span<const Choice> gold_labels, std::span<const AnnotatedTriplet> train);
// metrics.csv, metrics.json, confidence_hist.csv and reward_gaps.csv; returns
// the file names written.
std::vector<std::string> write_eval_outputs(const std::filesystem::path& dir, const EvalStageResult& result);

nlohmann::json trace_to_json(const TrainTrace& trace);

struct RunManifest {
  nlohmann::json doc;
  bool ok() const { return doc.value("status", "") == "complete"; }
};

// Runs every stage into `out_dir`, resuming stages whose recorded inputs and
// outputs still match. Writes manifest.json (deterministic) and timings.json
// (wall-clock, kept out of the manifest). A failing stage is recorded in the
// manifest with its diagnostics and stops the run; the manifest is returned.
// Progress goes to the spdlog logger named "cwpo" when one is registered.
RunManifest run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

// Checks that every artifact the manifest references exists with the
// recorded hash; returns the offending paths.
std::vector<std::string> verify_manifest(const std::filesystem::path& out_dir);

// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(std::string_view bytes);

}  // namespace cwpo
