#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "cwpo/prefdata.hpp"

namespace cwpo {

enum class Schema { labeled, unlabeled };

struct TokenLimits {
  int vocab_size = 32;
  int max_prompt_length = 64;
  int max_response_length = 64;
};

// One JSON object per line:
//   {"prompt":[..],"response_a":[..],"response_b":[..],"label":0|1|null}
// Blank lines are skipped; line numbers in errors are 1-based physical lines.
std::vector<PreferenceTriplet> read_jsonl(std::istream& in, Schema schema, const TokenLimits& limits);
std::vector<PreferenceTriplet> load_jsonl(const std::filesystem::path& path, Schema schema,
                                          const TokenLimits& limits);

void write_jsonl(std::ostream& out, std::span<const PreferenceTriplet> data);
void write_jsonl(const std::filesystem::path& path, std::span<const PreferenceTriplet> data);
void write_jsonl(const std::filesystem::path& path, std::span<const Triplet> data);

// Annotated rows add {"chosen":"a"|"b","confidence":..,"score_a":..,"score_b":..}
// with "label" kept null.
std::vector<AnnotatedTriplet> read_annotated_jsonl(std::istream& in, const TokenLimits& limits);
std::vector<AnnotatedTriplet> load_annotated_jsonl(const std::filesystem::path& path, const TokenLimits& limits);
void write_annotated_jsonl(std::ostream& out, std::span<const AnnotatedTriplet> data);
void write_annotated_jsonl(const std::filesystem::path& path, std::span<const AnnotatedTriplet> data);

// Gold labels of an unlabeled file, one 0/1 per line.
void write_labels(const std::filesystem::path& path, std::span<const Choice> labels);
std::vector<Choice> load_labels(const std::filesystem::path& path);

}  // namespace cwpo
