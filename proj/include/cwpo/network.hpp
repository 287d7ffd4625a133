#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwpo/params.hpp"
#include "cwpo/prefdata.hpp"
#include "cwpo/rng.hpp"

namespace cwpo {

// Special tokens live after the real vocabulary in the embedding table.
enum class Special : int { sep = 0, source = 1, candidate1 = 2, candidate2 = 3, eos = 4 };
inline constexpr int kSpecialCount = 5;

struct ArchConfig {
  int vocab_size = 32;
  int max_length = 64;
  int embed_dim = 32;
  int block_count = 1;
  int mlp_dim = 64;
  std::string block_kind = "attention";

  int input_vocab() const { return vocab_size + kSpecialCount; }
  int special(Special s) const { return vocab_size + static_cast<int>(s); }
  void validate() const;
  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);
  bool operator==(const ArchConfig&) const = default;
};

// [prompt..., SEP, response...]
Tokens encode_single(const ArchConfig& arch, const Prompt& x, const Response& y);
// [SOURCE, prompt..., EOS, CAND1, y1..., EOS, CAND2, y2..., EOS]
Tokens encode_pair(const ArchConfig& arch, const Prompt& x, const Response& y1, const Response& y2);
// Throws RangeError/LengthError unless tokens are in range and the encoded
// length fits max_length.
void check_single(const ArchConfig& arch, const Prompt& x, const Response& y);

// Flat offsets of every backbone array inside a ParamSet.
struct BackboneLayout {
  struct Block {
    std::size_t wq, wk, wv, wo, bo, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<Block> blocks;
};

BackboneLayout declare_backbone(ParamSet& params, const ArchConfig& arch);
BackboneLayout find_backbone(const ParamSet& params, const ArchConfig& arch);
void init_backbone(std::span<double> params, const BackboneLayout& layout, const ArchConfig& arch, Rng& rng);

// Activations retained by the forward pass for the backward pass.
struct BlockTape {
  std::vector<double> x, q, k, v, att, o, h1, act;
};

struct BackboneTape {
  int length = 0;
  Tokens tokens;
  std::vector<BlockTape> blocks;
  std::vector<double> out;  // length × embed_dim
};

void backbone_forward(const ArchConfig& arch, const BackboneLayout& layout, std::span<const double> params,
                      std::span<const int> tokens, BackboneTape& tape);

// Accumulates ∂/∂θ into `grad` given ∂/∂out in `d_out` (length × embed_dim,
// clobbered).
void backbone_backward(const ArchConfig& arch, const BackboneLayout& layout, std::span<const double> params,
                       const BackboneTape& tape, std::span<double> d_out, std::span<double> grad);

}  // namespace cwpo
