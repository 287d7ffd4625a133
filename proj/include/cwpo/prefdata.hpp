#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cwpo/rng.hpp"

namespace cwpo {

using Tokens = std::vector<int>;

struct Prompt {
  Tokens tokens;
  bool operator==(const Prompt&) const = default;
};

struct Response {
  Tokens tokens;
  bool operator==(const Response&) const = default;
};

// Which of the two candidate responses.
enum class Choice : std::uint8_t { A = 0, B = 1 };

constexpr Choice other(Choice c) { return c == Choice::A ? Choice::B : Choice::A; }

// A prompt with two candidates and no label attached. This is the only shape
// the annotation stage accepts.
struct Triplet {
  Prompt prompt;
  Response response_a;
  Response response_b;

  const Response& response(Choice c) const { return c == Choice::A ? response_a : response_b; }
  bool operator==(const Triplet&) const = default;
};

struct PreferenceTriplet {
  Prompt prompt;
  Response response_a;
  Response response_b;
  std::optional<Choice> human_label;

  Triplet unlabeled() const { return {prompt, response_a, response_b}; }
  const Response& response(Choice c) const { return c == Choice::A ? response_a : response_b; }
  bool operator==(const PreferenceTriplet&) const = default;
};

// A triplet after weak annotation. `chosen_side` records which of the
// source responses became y⁺ so the annotated JSONL can keep a/b order.
struct AnnotatedTriplet {
  Triplet source;
  Choice chosen_side = Choice::A;
  double confidence = 0.0;
  double score_chosen = 0.0;
  double score_rejected = 0.0;

  const Prompt& prompt() const { return source.prompt; }
  const Response& chosen() const { return source.response(chosen_side); }
  const Response& rejected() const { return source.response(other(chosen_side)); }
  double score_a() const { return chosen_side == Choice::A ? score_chosen : score_rejected; }
  double score_b() const { return chosen_side == Choice::A ? score_rejected : score_chosen; }
  bool operator==(const AnnotatedTriplet&) const = default;
};

// Gold labels of the unlabeled side, held apart from the training view.
struct EvaluationChannel {
  std::vector<Choice> gold_labels;
};

struct DatasetSplit {
  std::vector<PreferenceTriplet> labeled;
  std::vector<Triplet> unlabeled;
  EvaluationChannel evaluation;
  double split_ratio = 0.3;
  std::uint64_t seed = 0;

  // Unlabeled items re-joined with their gold labels, for metrics only.
  std::vector<PreferenceTriplet> evaluation_view() const;
};

// ⌈fraction·n⌉, robust to representation error such as 0.3·100.
std::size_t ceil_count(double fraction, std::size_t n);

// Deterministic seeded shuffle; the first ⌈ratio·N⌉ become the labeled side.
DatasetSplit split_dataset(std::span<const PreferenceTriplet> data, double ratio, std::uint64_t seed);

// Probability that A is reported under Bradley-Terry sampling with label flips.
double human_label_probability(double r_a, double r_b, double flip_noise);
Choice sample_human_label(double r_a, double r_b, Rng& rng, double flip_noise);

std::string_view to_string(Choice c);

}  // namespace cwpo
