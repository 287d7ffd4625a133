#include "cwpo/synth.hpp"

#include <cmath>
#include <optional>
#include <string>

#include "cwpo/errors.hpp"

namespace cwpo {

nlohmann::json GoldRewardSpec::to_json() const {
  return {{"seed", seed}, {"architecture", arch.to_json()}, {"target_std", target_std}, {"length_penalty", length_penalty}};
}

GoldRewardSpec GoldRewardSpec::from_json(const nlohmann::json& j) {
  GoldRewardSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.arch = ArchConfig::from_json(j.at("architecture"));
  s.target_std = j.at("target_std").get<double>();
  s.length_penalty = j.at("length_penalty").get<double>();
  return s;
}

GoldReward::GoldReward(const GoldRewardSpec& spec)
    : spec_(spec), net_(WeakAnnotator::create(spec.arch, derive_seed(spec.seed, 0x901d))) {
  if (!(spec.target_std > 0.0)) {
    throw ArgumentError("gold target_std must be positive");
  }
  // Calibrate the head scale on a seeded sample of uniform sequences.
  Rng rng(derive_seed(spec.seed, 0xca11b));
  const int len = std::max(1, std::min(6, (spec.arch.max_length - 1) / 2));
  constexpr int kSamples = 256;
  double sum = 0.0;
  double sum_sq = 0.0;
  for (int i = 0; i < kSamples; ++i) {
    Prompt x;
    Response y;
    for (int k = 0; k < len; ++k) {
      x.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.arch.vocab_size))));
      y.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.arch.vocab_size))));
    }
    double s = score(net_, x, y);
    sum += s;
    sum_sq += s * s;
  }
  const double mean = sum / kSamples;
  const double var = std::max(sum_sq / kSamples - mean * mean, 1e-12);
  const double factor = spec.target_std / std::sqrt(var);
  for (double& w : net_.model.params().view("score_head.w")) {
    w *= factor;
  }
  auto b = net_.model.params().view("score_head.b");
  b[0] = b[0] * factor - mean * factor;
}

double GoldReward::operator()(const Prompt& x, const Response& y) const {
  return score(net_, x, y) - spec_.length_penalty * static_cast<double>(y.tokens.size());
}

ResponseSampler::ResponseSampler(int vocab, std::uint64_t seed, double sharpness)
    : vocab_(vocab),
      cumulative_(static_cast<std::size_t>(vocab * vocab)),
      probs_(static_cast<std::size_t>(vocab * vocab)) {
  Rng rng(derive_seed(seed, 0xb16a));
  for (int prev = 0; prev < vocab; ++prev) {
    double z = 0.0;
    for (int next = 0; next < vocab; ++next) {
      double w = std::exp(sharpness * rng.normal());
      probs_[static_cast<std::size_t>(prev * vocab + next)] = w;
      z += w;
    }
    double acc = 0.0;
    for (int next = 0; next < vocab; ++next) {
      auto idx = static_cast<std::size_t>(prev * vocab + next);
      probs_[idx] /= z;
      acc += probs_[idx];
      cumulative_[idx] = acc;
    }
  }
}

double ResponseSampler::probability(int prev, int next) const {
  return probs_[static_cast<std::size_t>(prev * vocab_ + next)];
}

Response ResponseSampler::sample(const Prompt& x, int length, Rng& rng) const {
  Response y;
  int prev = x.tokens.back();
  for (int i = 0; i < length; ++i) {
    const double u = rng.uniform();
    const double* row = cumulative_.data() + prev * vocab_;
    int next = vocab_ - 1;
    for (int k = 0; k < vocab_; ++k) {
      if (u < row[k]) {
        next = k;
        break;
      }
    }
    y.tokens.push_back(next);
    prev = next;
  }
  return y;
}

namespace {

void validate(const SynthConfig& cfg) {
  if (cfg.n < 1) {
    throw ArgumentError("synth: n must be at least 1");
  }
  if (cfg.vocab < 1) {
    throw ArgumentError("synth: vocab must be at least 1");
  }
  for (const auto* r : {&cfg.prompt_length, &cfg.response_length}) {
    if (r->min < 1 || r->max < r->min) {
      throw ArgumentError("synth: length ranges must satisfy 1 <= min <= max");
    }
  }
  if (!(cfg.flip_noise >= 0.0 && cfg.flip_noise < 0.5)) {
    throw ArgumentError("synth: flip_noise must lie in [0, 0.5)");
  }
}

Prompt draw_prompt(const SynthConfig& cfg, Rng& rng) {
  Prompt x;
  const int len = rng.uniform_int(cfg.prompt_length.min, cfg.prompt_length.max);
  for (int k = 0; k < len; ++k) {
    x.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab))));
  }
  return x;
}

}  // namespace

std::vector<PreferenceTriplet> synth_generate(const GoldRewardSpec& spec, const SynthConfig& cfg) {
  validate(cfg);
  if (spec.arch.vocab_size != cfg.vocab) {
    throw ArgumentError("synth: gold reward vocabulary (" + std::to_string(spec.arch.vocab_size) +
                        ") differs from generator vocabulary (" + std::to_string(cfg.vocab) + ")");
  }
  // Built on first use so an impossible distinctness request (vocab 1) fails
  // with a generation error rather than the gold network's vocab check.
  std::optional<GoldReward> gold;
  const ResponseSampler sampler(cfg.vocab, cfg.seed, cfg.sampler_sharpness);
  std::vector<PreferenceTriplet> out;
  out.reserve(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    Rng rng(derive_seed(cfg.seed, i));
    PreferenceTriplet t;
    t.prompt = draw_prompt(cfg, rng);
    t.response_a = sampler.sample(t.prompt, rng.uniform_int(cfg.response_length.min, cfg.response_length.max), rng);
    int tries = 0;
    do {
      t.response_b = sampler.sample(t.prompt, rng.uniform_int(cfg.response_length.min, cfg.response_length.max), rng);
    } while (!cfg.allow_duplicates && t.response_b == t.response_a && ++tries < cfg.max_retries);
    if (!cfg.allow_duplicates && t.response_b == t.response_a) {
      throw GenerationError("could not draw two distinct responses for item " + std::to_string(i) + " after " +
                            std::to_string(cfg.max_retries) + " retries");
    }
    if (!gold) {
      gold.emplace(spec);
    }
    t.human_label =
        sample_human_label((*gold)(t.prompt, t.response_a), (*gold)(t.prompt, t.response_b), rng, cfg.flip_noise);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Prompt> synth_prompts(const SynthConfig& cfg, std::size_t count, std::uint64_t seed) {
  validate(cfg);
  std::vector<Prompt> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed ^ 0x9e0c0de5ULL, i));
    out.push_back(draw_prompt(cfg, rng));
  }
  return out;
}

}  // namespace cwpo
