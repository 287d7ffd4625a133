#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwpo/annotator.hpp"
#include "cwpo/network.hpp"
#include "cwpo/prefdata.hpp"

namespace cwpo {

// Frozen, randomly initialized scoring network of the annotator family. The
// head is rescaled so raw scores over a seeded calibration sample have
// standard deviation `target_std`. Never trained.
struct GoldRewardSpec {
  std::uint64_t seed = 1234;
  ArchConfig arch;
  double target_std = 2.0;
  double length_penalty = 0.0;  // subtracted per response token

  nlohmann::json to_json() const;
  static GoldRewardSpec from_json(const nlohmann::json& j);
};

struct LengthRange {
  int min = 4;
  int max = 6;
};

class GoldReward {
 public:
  explicit GoldReward(const GoldRewardSpec& spec);
  double operator()(const Prompt& x, const Response& y) const;
  const GoldRewardSpec& spec() const { return spec_; }

 private:
  GoldRewardSpec spec_;
  WeakAnnotator net_;
};

struct SynthConfig {
  std::size_t n = 2000;
  int vocab = 32;
  LengthRange prompt_length{4, 6};
  LengthRange response_length{6, 6};
  std::uint64_t seed = 7;
  double flip_noise = 0.1;
  bool allow_duplicates = false;
  // Inverse temperature of the seeded bigram response sampler.
  double sampler_sharpness = 1.5;
  int max_retries = 64;
};

// Seeded bigram sampler over response tokens; the first token conditions on
// the last prompt token.
class ResponseSampler {
 public:
  ResponseSampler(int vocab, std::uint64_t seed, double sharpness);
  Response sample(const Prompt& x, int length, Rng& rng) const;
  // Normalized transition probabilities p(next | prev).
  double probability(int prev, int next) const;

 private:
  int vocab_;
  std::vector<double> cumulative_;  // vocab × vocab
  std::vector<double> probs_;
};

// Prompt i.i.d. uniform; two responses (distinct unless allowed) from the
// sampler; label sampled against the gold reward with flip noise. A pure
// function of (spec, cfg).
std::vector<PreferenceTriplet> synth_generate(const GoldRewardSpec& spec, const SynthConfig& cfg);

// Fresh evaluation prompts drawn the same way as training prompts.
std::vector<Prompt> synth_prompts(const SynthConfig& cfg, std::size_t count, std::uint64_t seed);

}  // namespace cwpo
