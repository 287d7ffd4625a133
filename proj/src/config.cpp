#include "cwpo/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "cwpo/errors.hpp"
#include "cwpo/eval.hpp"

namespace cwpo {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) {
      in_string = !in_string;
    } else if (line[i] == '#' && !in_string) {
      return line.substr(0, i);
    }
  }
  return line;
}

bool valid_key(const std::string& k) {
  if (k.empty()) {
    return false;
  }
  for (char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
      return false;
    }
  }
  return true;
}

nlohmann::json parse_scalar(const std::string& text, const std::string& key_path) {
  if (text.empty()) {
    throw ConfigError(key_path, "missing value");
  }
  if (text.front() == '"') {
    if (text.size() < 2 || text.back() != '"') {
      throw ConfigError(key_path, "unterminated string");
    }
    std::string out;
    for (std::size_t i = 1; i + 1 < text.size(); ++i) {
      if (text[i] == '\\' && i + 2 < text.size()) {
        char n = text[++i];
        out.push_back(n == 'n' ? '\n' : n == 't' ? '\t' : n);
      } else {
        out.push_back(text[i]);
      }
    }
    return out;
  }
  if (text == "true") {
    return true;
  }
  if (text == "false") {
    return false;
  }
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (text.find_first_of(".eE") == std::string::npos || text == "inf" || text == "nan") {
    std::int64_t iv = 0;
    auto [p, ec] = std::from_chars(first + (text.front() == '+' ? 1 : 0), last, iv);
    if (ec == std::errc() && p == last) {
      return iv;
    }
  } else {
    double dv = 0.0;
    auto [p, ec] = std::from_chars(first + (text.front() == '+' ? 1 : 0), last, dv);
    if (ec == std::errc() && p == last) {
      return dv;
    }
  }
  throw ConfigError(key_path, "cannot parse value '" + text + "'");
}

nlohmann::json parse_value(const std::string& text, const std::string& key_path) {
  if (!text.empty() && text.front() == '[') {
    if (text.back() != ']') {
      throw ConfigError(key_path, "unterminated array");
    }
    nlohmann::json arr = nlohmann::json::array();
    const std::string body = trim(std::string_view(text).substr(1, text.size() - 2));
    if (body.empty()) {
      return arr;
    }
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      arr.push_back(parse_scalar(trim(item), key_path));
    }
    return arr;
  }
  return parse_scalar(text, key_path);
}

}  // namespace

nlohmann::json parse_config(std::istream& in) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* table = &root;
  std::string prefix;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) {
      continue;
    }
    const std::string where = "line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError(where, "malformed section header");
      }
      const std::string name = trim(std::string_view(line).substr(1, line.size() - 2));
      table = &root;
      prefix.clear();
      std::stringstream ss(name);
      std::string part;
      while (std::getline(ss, part, '.')) {
        part = trim(part);
        if (!valid_key(part)) {
          throw ConfigError(where, "bad section name '" + name + "'");
        }
        prefix += (prefix.empty() ? "" : ".") + part;
        nlohmann::json& next = (*table)[part];
        if (next.is_null()) {
          next = nlohmann::json::object();
        } else if (!next.is_object()) {
          throw ConfigError(prefix, "already defined as a value");
        }
        table = &next;
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where, "expected 'key = value'");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string key_path = prefix.empty() ? key : prefix + "." + key;
    if (!valid_key(key)) {
      throw ConfigError(key_path, "bad key name (" + where + ")");
    }
    if (table->contains(key)) {
      throw ConfigError(key_path, "duplicate key (" + where + ")");
    }
    (*table)[key] = parse_value(trim(std::string_view(line).substr(eq + 1)), key_path);
  }
  return root;
}

nlohmann::json parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError(path.string(), "cannot open config file");
  }
  return parse_config(in);
}

namespace {

std::string render_scalar(const nlohmann::json& v) {
  if (v.is_string()) {
    return nlohmann::json(v).dump();
  }
  if (v.is_number_float()) {
    std::string s = format_double(v.get<double>());
    if (s.find_first_of(".eEn") == std::string::npos) {
      s += ".0";
    }
    return s;
  }
  return v.dump();
}

std::string render_value(const nlohmann::json& v) {
  if (v.is_array()) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      out += (i ? ", " : "") + render_scalar(v[i]);
    }
    return out + "]";
  }
  return render_scalar(v);
}

void render_table(std::ostringstream& out, const nlohmann::json& table, const std::string& name) {
  bool header = false;
  for (const auto& [k, v] : table.items()) {
    if (v.is_object()) {
      continue;
    }
    if (!header && !name.empty()) {
      out << '[' << name << "]\n";
      header = true;
    }
    out << k << " = " << render_value(v) << '\n';
  }
  if (header) {
    out << '\n';
  }
  for (const auto& [k, v] : table.items()) {
    if (v.is_object()) {
      render_table(out, v, name.empty() ? k : name + "." + k);
    }
  }
}

}  // namespace

std::string render_config(const nlohmann::json& tree) {
  std::ostringstream out;
  render_table(out, tree, "");
  return out.str();
}

}  // namespace cwpo
