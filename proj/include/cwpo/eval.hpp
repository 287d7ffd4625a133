#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwpo/kernels.hpp"
#include "cwpo/policy.hpp"
#include "cwpo/prefdata.hpp"
#include "cwpo/synth.hpp"

namespace cwpo {

struct GenSettings {
  int max_new = 6;
  double temperature = 0.95;
  nlohmann::json to_json() const { return {{"max_new", max_new}, {"temperature", temperature}}; }
};

// `value` is empty when the metric is undefined (win rate with all ties).
struct MetricReport {
  std::string name;
  std::optional<double> value;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::vector<double> per_seed;
  nlohmann::json settings = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
};

// Per-prompt rewards of the two sampled responses.
struct RewardPair {
  double aligned = 0.0;
  double sft = 0.0;
  double gap() const { return aligned - sft; }
};

// Strict wins over n; ties are non-wins.
MetricReport gra_from_rewards(std::span<const RewardPair> rewards);

// One response per model per prompt; both samplers for prompt i use the
// stream derive_seed(seed, i). When `rewards` is non-null it receives the
// per-prompt gold rewards.
MetricReport gold_reward_accuracy(const PolicyModel& aligned, const ReferenceSnapshot& sft,
                                  std::span<const Prompt> prompts, const GoldReward& gold, const GenSettings& gen,
                                  std::uint64_t seed, std::vector<RewardPair>* rewards = nullptr,
                                  Exec exec = Exec::parallel);

// Fraction of annotations whose chosen side matches the gold label. Gold
// labels must be present for every item.
MetricReport annotator_agreement(std::span<const AnnotatedTriplet> annotated,
                                 std::span<const std::optional<Choice>> gold);
MetricReport annotator_agreement(std::span<const AnnotatedTriplet> annotated, const EvaluationChannel& gold);

// wins_a / (wins_a + wins_b); ties excluded and reported in extra.ties.
MetricReport win_rate_from_rewards(std::span<const double> reward_a, std::span<const double> reward_b);
MetricReport win_rate(const PolicyModel& model_a, const PolicyModel& model_b, std::span<const Prompt> prompts,
                      const GoldReward& judge, const GenSettings& gen, std::uint64_t seed,
                      Exec exec = Exec::parallel);

struct HistogramBin {
  double low = 0.0;
  double high = 0.0;
  std::size_t count = 0;
};

// Equal-width bins on [0,1]; the last bin is closed on the right.
std::vector<HistogramBin> confidence_histogram(std::span<const AnnotatedTriplet> data, int bins);

void write_histogram_csv(const std::filesystem::path& path, std::span<const HistogramBin> hist);
// metric,value,n,seed; undefined values are written as "nan".
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricReport> metrics);
void write_metrics_json(const std::filesystem::path& path, std::span<const MetricReport> metrics);
// prompt_index,reward_aligned,reward_sft,gap
void write_reward_gaps_csv(const std::filesystem::path& path, std::span<const RewardPair> rewards);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace cwpo
