#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include <nlohmann/json.hpp>

#include "cwpo/params.hpp"

namespace cwpo {

// Binary container, little-endian:
//   bytes  "CWPOCKPT"
//   u32    format version (1)
//   u32    metadata length, then that many bytes of UTF-8 JSON
//   u32    array count
//   per array:
//     u32 name length, name bytes
//     u8  dtype tag (1 = float64)
//     u32 rank, then rank × u64 dims
//     float64 × prod(dims)
// Metadata always carries "dtype", "seed" and "step"; models add
// "architecture" and a "kind" / "annotator_kind" tag.
struct Checkpoint {
  ParamSet params;
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cwpo
