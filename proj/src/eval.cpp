#include "cwpo/eval.hpp"

#include <charconv>
#include <fstream>

#include "cwpo/errors.hpp"

namespace cwpo {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = {{"metric", name}, {"n", n}, {"seed", seed}, {"settings", settings}};
  j["value"] = value ? nlohmann::json(*value) : nlohmann::json(nullptr);
  if (!per_seed.empty()) {
    j["per_seed"] = per_seed;
  }
  if (!extra.empty()) {
    j["extra"] = extra;
  }
  return j;
}

MetricReport gra_from_rewards(std::span<const RewardPair> rewards) {
  if (rewards.empty()) {
    throw ArgumentError("gold reward accuracy needs at least one prompt");
  }
  std::size_t wins = 0;
  std::size_t ties = 0;
  for (const auto& r : rewards) {
    wins += r.aligned > r.sft ? 1 : 0;
    ties += r.aligned == r.sft ? 1 : 0;
  }
  MetricReport m;
  m.name = "gold_reward_accuracy";
  m.value = static_cast<double>(wins) / static_cast<double>(rewards.size());
  m.n = rewards.size();
  m.extra = {{"wins", wins}, {"ties", ties}};
  return m;
}

MetricReport gold_reward_accuracy(const PolicyModel& aligned, const ReferenceSnapshot& sft,
                                  std::span<const Prompt> prompts, const GoldReward& gold, const GenSettings& gen,
                                  std::uint64_t seed, std::vector<RewardPair>* rewards, Exec exec) {
  if (prompts.empty()) {
    throw ArgumentError("gold reward accuracy needs at least one prompt");
  }
  std::vector<RewardPair> local(prompts.size());
  for_indices(
      prompts.size(),
      [&](std::size_t i) {
        Rng ra(derive_seed(seed, i));
        Rng rb(derive_seed(seed, i));
        const Response ya = sample_response(aligned, prompts[i], gen.max_new, gen.temperature, ra);
        const Response yb = sample_response(sft.model(), prompts[i], gen.max_new, gen.temperature, rb);
        local[i] = {gold(prompts[i], ya), gold(prompts[i], yb)};
      },
      exec);
  MetricReport m = gra_from_rewards(local);
  m.seed = seed;
  m.settings = gen.to_json();
  if (rewards != nullptr) {
    *rewards = std::move(local);
  }
  return m;
}

MetricReport annotator_agreement(std::span<const AnnotatedTriplet> annotated,
                                 std::span<const std::optional<Choice>> gold) {
  if (annotated.size() != gold.size()) {
    throw ArgumentError("annotator agreement: " + std::to_string(annotated.size()) + " annotations but " +
                        std::to_string(gold.size()) + " gold labels");
  }
  if (annotated.empty()) {
    throw ArgumentError("annotator agreement needs at least one item");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < annotated.size(); ++i) {
    if (!gold[i]) {
      throw ArgumentError("annotator agreement: item " + std::to_string(i) + " has no gold label");
    }
    hits += annotated[i].chosen_side == *gold[i] ? 1 : 0;
  }
  MetricReport m;
  m.name = "annotator_agreement";
  m.value = static_cast<double>(hits) / static_cast<double>(annotated.size());
  m.n = annotated.size();
  return m;
}

MetricReport annotator_agreement(std::span<const AnnotatedTriplet> annotated, const EvaluationChannel& gold) {
  std::vector<std::optional<Choice>> labels(gold.gold_labels.begin(), gold.gold_labels.end());
  return annotator_agreement(annotated, labels);
}

MetricReport win_rate_from_rewards(std::span<const double> reward_a, std::span<const double> reward_b) {
  if (reward_a.size() != reward_b.size() || reward_a.empty()) {
    throw ArgumentError("win rate needs two equal, non-empty reward lists");
  }
  std::size_t wins_a = 0;
  std::size_t wins_b = 0;
  for (std::size_t i = 0; i < reward_a.size(); ++i) {
    wins_a += reward_a[i] > reward_b[i] ? 1 : 0;
    wins_b += reward_b[i] > reward_a[i] ? 1 : 0;
  }
  const std::size_t effective = wins_a + wins_b;
  MetricReport m;
  m.name = "win_rate";
  if (effective > 0) {
    m.value = static_cast<double>(wins_a) / static_cast<double>(effective);
  }
  m.n = effective;
  m.extra = {{"wins_a", wins_a}, {"wins_b", wins_b}, {"ties", reward_a.size() - effective},
             {"prompts", reward_a.size()}};
  return m;
}

MetricReport win_rate(const PolicyModel& model_a, const PolicyModel& model_b, std::span<const Prompt> prompts,
                      const GoldReward& judge, const GenSettings& gen, std::uint64_t seed, Exec exec) {
  if (prompts.empty()) {
    throw ArgumentError("win rate needs at least one prompt");
  }
  std::vector<double> ra(prompts.size());
  std::vector<double> rb(prompts.size());
  for_indices(
      prompts.size(),
      [&](std::size_t i) {
        Rng ga(derive_seed(seed, i));
        Rng gb(derive_seed(seed, i));
        ra[i] = judge(prompts[i], sample_response(model_a, prompts[i], gen.max_new, gen.temperature, ga));
        rb[i] = judge(prompts[i], sample_response(model_b, prompts[i], gen.max_new, gen.temperature, gb));
      },
      exec);
  MetricReport m = win_rate_from_rewards(ra, rb);
  m.seed = seed;
  m.settings = gen.to_json();
  return m;
}

std::vector<HistogramBin> confidence_histogram(std::span<const AnnotatedTriplet> data, int bins) {
  if (bins < 1) {
    throw ArgumentError("histogram needs at least one bin");
  }
  std::vector<HistogramBin> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].low = static_cast<double>(b) / bins;
    out[static_cast<std::size_t>(b)].high = static_cast<double>(b + 1) / bins;
  }
  for (const auto& t : data) {
    auto b = static_cast<long>(t.confidence * bins);
    b = std::clamp(b, 0L, static_cast<long>(bins - 1));
    out[static_cast<std::size_t>(b)].count += 1;
  }
  return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  return out;
}

}  // namespace

void write_histogram_csv(const std::filesystem::path& path, std::span<const HistogramBin> hist) {
  auto out = open_out(path);
  out << "bin_low,bin_high,count\n";
  for (const auto& b : hist) {
    out << format_double(b.low) << ',' << format_double(b.high) << ',' << b.count << '\n';
  }
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricReport> metrics) {
  auto out = open_out(path);
  out << "metric,value,n,seed\n";
  for (const auto& m : metrics) {
    out << m.name << ',' << (m.value ? format_double(*m.value) : "nan") << ',' << m.n << ',' << m.seed << '\n';
  }
}

void write_metrics_json(const std::filesystem::path& path, std::span<const MetricReport> metrics) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : metrics) {
    arr.push_back(m.to_json());
  }
  auto out = open_out(path);
  out << nlohmann::json{{"metrics", arr}}.dump(2) << '\n';
}

void write_reward_gaps_csv(const std::filesystem::path& path, std::span<const RewardPair> rewards) {
  auto out = open_out(path);
  out << "prompt_index,reward_aligned,reward_sft,gap\n";
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out << i << ',' << format_double(rewards[i].aligned) << ',' << format_double(rewards[i].sft) << ','
        << format_double(rewards[i].gap()) << '\n';
  }
}

}  // namespace cwpo
