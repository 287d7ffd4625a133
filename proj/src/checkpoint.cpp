#include "cwpo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "cwpo/errors.hpp"

namespace cwpo {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'W', 'P', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) {
    throw IoError("truncated checkpoint");
  }
  return v;
}

std::string get_bytes(std::istream& in, std::size_t n) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) {
    throw IoError("truncated checkpoint");
  }
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  nlohmann::json meta = ckpt.meta;
  meta["dtype"] = "f64";
  if (!meta.contains("seed")) {
    meta["seed"] = 0;
  }
  if (!meta.contains("step")) {
    meta["step"] = 0;
  }
  std::string meta_text = meta.dump();
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  const auto& entries = ckpt.params.entries();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(out, kDtypeF64);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) {
      put<std::uint64_t>(out, d);
    }
    auto data = ckpt.params.view(e.name);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  }
  if (!out) {
    throw IoError("failed writing checkpoint");
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string magic = get_bytes(in, sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("not a checkpoint (bad magic)");
  }
  auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  auto meta_len = get<std::uint32_t>(in);
  try {
    ckpt.meta = nlohmann::json::parse(get_bytes(in, meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  auto count = get<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    auto name_len = get<std::uint32_t>(in);
    std::string name = get_bytes(in, name_len);
    auto dtype = get<std::uint8_t>(in);
    if (dtype != kDtypeF64) {
      throw IoError("unsupported dtype tag " + std::to_string(dtype) + " for " + name);
    }
    auto rank = get<std::uint32_t>(in);
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in)));
    }
    ckpt.params.add(name, shape);
    auto data = ckpt.params.view(name);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    if (!in) {
      throw IoError("truncated checkpoint data for " + name);
    }
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  return read_checkpoint(in);
}

}  // namespace cwpo
