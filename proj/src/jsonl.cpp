#include "cwpo/jsonl.hpp"

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "cwpo/errors.hpp"

namespace cwpo {
namespace {

using nlohmann::json;

Tokens parse_tokens(const json& obj, const char* key, std::size_t line, int vocab, int max_len) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw SchemaError(line, std::string("missing field \"") + key + "\"");
  }
  if (!it->is_array()) {
    throw SchemaError(line, std::string("field \"") + key + "\" must be an array of integers");
  }
  Tokens out;
  out.reserve(it->size());
  for (const json& v : *it) {
    if (!v.is_number_integer()) {
      throw SchemaError(line, std::string("field \"") + key + "\" must contain only integers");
    }
    auto tok = v.get<long long>();
    if (tok < 0 || tok >= vocab) {
      throw RangeError("line " + std::to_string(line) + ": token " + std::to_string(tok) + " in \"" + key +
                       "\" outside vocabulary [0," + std::to_string(vocab) + ")");
    }
    out.push_back(static_cast<int>(tok));
  }
  if (out.empty()) {
    throw SchemaError(line, std::string("field \"") + key + "\" must be non-empty");
  }
  if (static_cast<int>(out.size()) > max_len) {
    throw LengthError("line " + std::to_string(line) + ": \"" + key + "\" has length " +
                      std::to_string(out.size()) + " > " + std::to_string(max_len));
  }
  return out;
}

std::optional<Choice> parse_label(const json& obj, std::size_t line) {
  auto it = obj.find("label");
  if (it == obj.end() || it->is_null()) {
    return std::nullopt;
  }
  if (!it->is_number_integer()) {
    throw SchemaError(line, "invalid label " + it->dump() + " (expected 0, 1 or null)");
  }
  auto v = it->get<long long>();
  if (v != 0 && v != 1) {
    throw SchemaError(line, "invalid label " + std::to_string(v) + " (expected 0, 1 or null)");
  }
  return v == 0 ? Choice::A : Choice::B;
}

json parse_line(const std::string& text, std::size_t line) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
  if (!obj.is_object()) {
    throw ParseError(line, "expected a JSON object");
  }
  return obj;
}

PreferenceTriplet parse_triplet(const json& obj, std::size_t line, const TokenLimits& limits) {
  PreferenceTriplet t;
  t.prompt.tokens = parse_tokens(obj, "prompt", line, limits.vocab_size, limits.max_prompt_length);
  t.response_a.tokens = parse_tokens(obj, "response_a", line, limits.vocab_size, limits.max_response_length);
  t.response_b.tokens = parse_tokens(obj, "response_b", line, limits.vocab_size, limits.max_response_length);
  t.human_label = parse_label(obj, line);
  return t;
}

json triplet_json(const Prompt& p, const Response& a, const Response& b, std::optional<Choice> label) {
  json obj;
  obj["prompt"] = p.tokens;
  obj["response_a"] = a.tokens;
  obj["response_b"] = b.tokens;
  obj["label"] = label ? json(static_cast<int>(*label)) : json(nullptr);
  return obj;
}

template <class F>
void for_each_line(std::istream& in, F&& f) {
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') {
      text.pop_back();
    }
    if (text.find_first_not_of(" \t") == std::string::npos) {
      continue;
    }
    f(text, line);
  }
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  return out;
}

}  // namespace

std::vector<PreferenceTriplet> read_jsonl(std::istream& in, Schema schema, const TokenLimits& limits) {
  std::vector<PreferenceTriplet> out;
  for_each_line(in, [&](const std::string& text, std::size_t line) {
    json obj = parse_line(text, line);
    PreferenceTriplet t = parse_triplet(obj, line, limits);
    if (schema == Schema::labeled && !t.human_label) {
      throw SchemaError(line, "labeled schema requires \"label\" to be 0 or 1");
    }
    if (schema == Schema::unlabeled && t.human_label) {
      throw SchemaError(line, "unlabeled schema forbids a \"label\" value");
    }
    out.push_back(std::move(t));
  });
  return out;
}

std::vector<PreferenceTriplet> load_jsonl(const std::filesystem::path& path, Schema schema,
                                          const TokenLimits& limits) {
  auto in = open_in(path);
  return read_jsonl(in, schema, limits);
}

void write_jsonl(std::ostream& out, std::span<const PreferenceTriplet> data) {
  for (const auto& t : data) {
    out << triplet_json(t.prompt, t.response_a, t.response_b, t.human_label).dump() << '\n';
  }
}

void write_jsonl(const std::filesystem::path& path, std::span<const PreferenceTriplet> data) {
  auto out = open_out(path);
  write_jsonl(out, data);
}

void write_jsonl(const std::filesystem::path& path, std::span<const Triplet> data) {
  auto out = open_out(path);
  for (const auto& t : data) {
    out << triplet_json(t.prompt, t.response_a, t.response_b, std::nullopt).dump() << '\n';
  }
}

std::vector<AnnotatedTriplet> read_annotated_jsonl(std::istream& in, const TokenLimits& limits) {
  std::vector<AnnotatedTriplet> out;
  for_each_line(in, [&](const std::string& text, std::size_t line) {
    json obj = parse_line(text, line);
    PreferenceTriplet t = parse_triplet(obj, line, limits);
    AnnotatedTriplet a;
    a.source = t.unlabeled();
    auto chosen = obj.find("chosen");
    if (chosen == obj.end() || !chosen->is_string() || (*chosen != "a" && *chosen != "b")) {
      throw SchemaError(line, "annotated rows require \"chosen\": \"a\" | \"b\"");
    }
    a.chosen_side = *chosen == "a" ? Choice::A : Choice::B;
    for (const char* key : {"confidence", "score_a", "score_b"}) {
      if (!obj.contains(key) || !obj[key].is_number()) {
        throw SchemaError(line, std::string("annotated rows require numeric \"") + key + "\"");
      }
    }
    a.confidence = obj["confidence"].get<double>();
    if (!(a.confidence >= 0.0 && a.confidence <= 1.0)) {
      throw SchemaError(line, "confidence must lie in [0,1]");
    }
    double sa = obj["score_a"].get<double>();
    double sb = obj["score_b"].get<double>();
    a.score_chosen = a.chosen_side == Choice::A ? sa : sb;
    a.score_rejected = a.chosen_side == Choice::A ? sb : sa;
    out.push_back(std::move(a));
  });
  return out;
}

std::vector<AnnotatedTriplet> load_annotated_jsonl(const std::filesystem::path& path, const TokenLimits& limits) {
  auto in = open_in(path);
  return read_annotated_jsonl(in, limits);
}

void write_annotated_jsonl(std::ostream& out, std::span<const AnnotatedTriplet> data) {
  for (const auto& a : data) {
    json obj = triplet_json(a.source.prompt, a.source.response_a, a.source.response_b, std::nullopt);
    obj["chosen"] = std::string(to_string(a.chosen_side));
    obj["confidence"] = a.confidence;
    obj["score_a"] = a.score_a();
    obj["score_b"] = a.score_b();
    out << obj.dump() << '\n';
  }
}

void write_annotated_jsonl(const std::filesystem::path& path, std::span<const AnnotatedTriplet> data) {
  auto out = open_out(path);
  write_annotated_jsonl(out, data);
}

void write_labels(const std::filesystem::path& path, std::span<const Choice> labels) {
  auto out = open_out(path);
  for (Choice c : labels) {
    out << static_cast<int>(c) << '\n';
  }
}

std::vector<Choice> load_labels(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Choice> out;
  for_each_line(in, [&](const std::string& text, std::size_t line) {
    if (text == "0") {
      out.push_back(Choice::A);
    } else if (text == "1") {
      out.push_back(Choice::B);
    } else {
      throw ParseError(line, "expected 0 or 1, got \"" + text + "\"");
    }
  });
  return out;
}

}  // namespace cwpo
