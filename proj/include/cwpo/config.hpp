#pragma once

#include <filesystem>
#include <istream>
#include <string>

#include <nlohmann/json.hpp>

namespace cwpo {

// Reads the subset of TOML used by run files:
//   # comment
//   [section]            (dotted names such as [weak.optim] nest)
//   key = 1 | 2.5 | true | "text" | [1, 2]
// Keys may not repeat within a table. Errors are ConfigError with the key
// path or line number.
nlohmann::json parse_config(std::istream& in);
nlohmann::json parse_config_file(const std::filesystem::path& path);

// Renders a two-level table tree back into the same format.
std::string render_config(const nlohmann::json& tree);

}  // namespace cwpo
