#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cwpo/prefdata.hpp"
#include "cwpo/rng.hpp"

namespace cwpo::test {

inline Tokens random_tokens(Rng& rng, int len, int vocab) {
  Tokens t(static_cast<std::size_t>(len));
  for (auto& v : t) {
    v = rng.uniform_int(0, vocab - 1);
  }
  return t;
}

inline Triplet random_triplet(Rng& rng, int vocab, int prompt_len = 4, int resp_len = 4) {
  return {Prompt{random_tokens(rng, prompt_len, vocab)}, Response{random_tokens(rng, resp_len, vocab)},
          Response{random_tokens(rng, resp_len, vocab)}};
}

inline double rel_diff(double a, double b) {
  const double d = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / d;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(
                                                 std::chrono::steady_clock::now().time_since_epoch().count()));
    path_ = std::filesystem::temp_directory_path() / ("cwpo_" + tag + "_" + std::to_string(rng.next() % 1000000007));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace cwpo::test
