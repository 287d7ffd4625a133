#include "cwpo/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cwpo/errors.hpp"

namespace cwpo {

void ArchConfig::validate() const {
  if (vocab_size < 2) {
    throw ArgumentError("vocab_size must be at least 2");
  }
  if (max_length < 2 || embed_dim < 1 || block_count < 1 || mlp_dim < 1) {
    throw ArgumentError("architecture dimensions must be positive");
  }
  if (block_kind != "attention") {
    throw ArgumentError("unsupported block kind \"" + block_kind + "\"");
  }
}

nlohmann::json ArchConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"max_length", max_length}, {"embed_dim", embed_dim},
          {"block_count", block_count}, {"mlp_dim", mlp_dim},       {"block_kind", block_kind}};
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.vocab_size = j.at("vocab_size").get<int>();
  a.max_length = j.at("max_length").get<int>();
  a.embed_dim = j.at("embed_dim").get<int>();
  a.block_count = j.at("block_count").get<int>();
  a.mlp_dim = j.at("mlp_dim").get<int>();
  a.block_kind = j.at("block_kind").get<std::string>();
  a.validate();
  return a;
}

namespace {

void check_tokens(const ArchConfig& arch, const Tokens& t, const char* what) {
  if (t.empty()) {
    throw LengthError(std::string(what) + " must be non-empty");
  }
  for (int v : t) {
    if (v < 0 || v >= arch.vocab_size) {
      throw RangeError(std::string(what) + " token " + std::to_string(v) + " outside [0," +
                       std::to_string(arch.vocab_size) + ")");
    }
  }
}

void check_length(const ArchConfig& arch, std::size_t n) {
  if (n > static_cast<std::size_t>(arch.max_length)) {
    throw LengthError("encoded length " + std::to_string(n) + " exceeds max_length " +
                      std::to_string(arch.max_length));
  }
}

}  // namespace

void check_single(const ArchConfig& arch, const Prompt& x, const Response& y) {
  check_tokens(arch, x.tokens, "prompt");
  check_tokens(arch, y.tokens, "response");
  check_length(arch, x.tokens.size() + 1 + y.tokens.size());
}

Tokens encode_single(const ArchConfig& arch, const Prompt& x, const Response& y) {
  check_single(arch, x, y);
  Tokens out = x.tokens;
  out.push_back(arch.special(Special::sep));
  out.insert(out.end(), y.tokens.begin(), y.tokens.end());
  return out;
}

Tokens encode_pair(const ArchConfig& arch, const Prompt& x, const Response& y1, const Response& y2) {
  check_tokens(arch, x.tokens, "prompt");
  check_tokens(arch, y1.tokens, "candidate 1");
  check_tokens(arch, y2.tokens, "candidate 2");
  check_length(arch, x.tokens.size() + y1.tokens.size() + y2.tokens.size() + 6);
  Tokens out;
  out.push_back(arch.special(Special::source));
  out.insert(out.end(), x.tokens.begin(), x.tokens.end());
  out.push_back(arch.special(Special::eos));
  out.push_back(arch.special(Special::candidate1));
  out.insert(out.end(), y1.tokens.begin(), y1.tokens.end());
  out.push_back(arch.special(Special::eos));
  out.push_back(arch.special(Special::candidate2));
  out.insert(out.end(), y2.tokens.begin(), y2.tokens.end());
  out.push_back(arch.special(Special::eos));
  return out;
}

BackboneLayout declare_backbone(ParamSet& params, const ArchConfig& arch) {
  arch.validate();
  const auto d = static_cast<std::size_t>(arch.embed_dim);
  const auto m = static_cast<std::size_t>(arch.mlp_dim);
  params.add("backbone.tok_emb", {static_cast<std::size_t>(arch.input_vocab()), d});
  params.add("backbone.pos_emb", {static_cast<std::size_t>(arch.max_length), d});
  for (int b = 0; b < arch.block_count; ++b) {
    const std::string p = "backbone.block" + std::to_string(b) + ".";
    params.add(p + "wq", {d, d});
    params.add(p + "wk", {d, d});
    params.add(p + "wv", {d, d});
    params.add(p + "wo", {d, d});
    params.add(p + "bo", {d});
    params.add(p + "w1", {m, d});
    params.add(p + "b1", {m});
    params.add(p + "w2", {d, m});
    params.add(p + "b2", {d});
  }
  return find_backbone(params, arch);
}

BackboneLayout find_backbone(const ParamSet& params, const ArchConfig& arch) {
  BackboneLayout layout;
  layout.tok_emb = params.offset("backbone.tok_emb");
  layout.pos_emb = params.offset("backbone.pos_emb");
  for (int b = 0; b < arch.block_count; ++b) {
    const std::string p = "backbone.block" + std::to_string(b) + ".";
    layout.blocks.push_back({params.offset(p + "wq"), params.offset(p + "wk"), params.offset(p + "wv"),
                             params.offset(p + "wo"), params.offset(p + "bo"), params.offset(p + "w1"),
                             params.offset(p + "b1"), params.offset(p + "w2"), params.offset(p + "b2")});
  }
  if (params.entry("backbone.tok_emb").shape !=
      std::vector<std::size_t>{static_cast<std::size_t>(arch.input_vocab()), static_cast<std::size_t>(arch.embed_dim)}) {
    throw ArgumentError("backbone parameters do not match the architecture");
  }
  return layout;
}

void init_backbone(std::span<double> params, const BackboneLayout& layout, const ArchConfig& arch, Rng& rng) {
  const int d = arch.embed_dim;
  const int m = arch.mlp_dim;
  auto fill = [&](std::size_t offset, std::size_t n, double stddev) {
    for (std::size_t i = 0; i < n; ++i) {
      params[offset + i] = stddev * rng.normal();
    }
  };
  const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double in_m = 1.0 / std::sqrt(static_cast<double>(m));
  fill(layout.tok_emb, static_cast<std::size_t>(arch.input_vocab() * d), 1.0);
  fill(layout.pos_emb, static_cast<std::size_t>(arch.max_length * d), 0.5);
  for (const auto& blk : layout.blocks) {
    fill(blk.wq, static_cast<std::size_t>(d * d), in_d);
    fill(blk.wk, static_cast<std::size_t>(d * d), in_d);
    fill(blk.wv, static_cast<std::size_t>(d * d), in_d);
    fill(blk.wo, static_cast<std::size_t>(d * d), 0.5 * in_d);
    fill(blk.w1, static_cast<std::size_t>(m * d), in_d);
    fill(blk.w2, static_cast<std::size_t>(d * m), 0.5 * in_m);
    std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(blk.bo), d, 0.0);
    std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(blk.b1), m, 0.0);
    std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(blk.b2), d, 0.0);
  }
}

namespace {

// y[o] = Σ_i W[o,i] x[i] (+ b[o]); W row-major [out][in].
inline void matvec(const double* w, const double* b, const double* x, double* y, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const double* row = w + static_cast<std::ptrdiff_t>(o) * in;
    double acc = b ? b[o] : 0.0;
    for (int i = 0; i < in; ++i) {
      acc += row[i] * x[i];
    }
    y[o] = acc;
  }
}

// dx += Wᵀ dy; dW += dy ⊗ x.
inline void matvec_backward(const double* w, const double* x, const double* dy, double* dx, double* dw, int out,
                            int in) {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0.0) {
      continue;
    }
    const double* row = w + static_cast<std::ptrdiff_t>(o) * in;
    double* drow = dw + static_cast<std::ptrdiff_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      drow[i] += g * x[i];
      if (dx) {
        dx[i] += g * row[i];
      }
    }
  }
}

}  // namespace

void backbone_forward(const ArchConfig& arch, const BackboneLayout& layout, std::span<const double> params,
                      std::span<const int> tokens, BackboneTape& tape) {
  const int n = static_cast<int>(tokens.size());
  const int d = arch.embed_dim;
  const int m = arch.mlp_dim;
  if (n < 1 || n > arch.max_length) {
    throw LengthError("sequence length " + std::to_string(n) + " outside [1, " + std::to_string(arch.max_length) + "]");
  }
  const double* p = params.data();
  tape.length = n;
  tape.tokens.assign(tokens.begin(), tokens.end());
  tape.blocks.resize(layout.blocks.size());

  std::vector<double> x(static_cast<std::size_t>(n * d));
  for (int t = 0; t < n; ++t) {
    const int tok = tokens[t];
    if (tok < 0 || tok >= arch.input_vocab()) {
      throw RangeError("token " + std::to_string(tok) + " outside the input vocabulary");
    }
    const double* e = p + layout.tok_emb + static_cast<std::size_t>(tok * d);
    const double* pe = p + layout.pos_emb + static_cast<std::size_t>(t * d);
    for (int j = 0; j < d; ++j) {
      x[static_cast<std::size_t>(t * d + j)] = e[j] + pe[j];
    }
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const auto nd = static_cast<std::size_t>(n * d);
  for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
    const auto& blk = layout.blocks[b];
    BlockTape& bt = tape.blocks[b];
    bt.x = x;
    bt.q.assign(nd, 0.0);
    bt.k.assign(nd, 0.0);
    bt.v.assign(nd, 0.0);
    bt.att.assign(static_cast<std::size_t>(n * n), 0.0);
    bt.o.assign(nd, 0.0);
    bt.h1.assign(nd, 0.0);
    bt.act.assign(static_cast<std::size_t>(n * m), 0.0);
    for (int t = 0; t < n; ++t) {
      const double* xt = bt.x.data() + t * d;
      matvec(p + blk.wq, nullptr, xt, bt.q.data() + t * d, d, d);
      matvec(p + blk.wk, nullptr, xt, bt.k.data() + t * d, d, d);
      matvec(p + blk.wv, nullptr, xt, bt.v.data() + t * d, d, d);
    }
    for (int t = 0; t < n; ++t) {
      double* row = bt.att.data() + t * n;
      const double* qt = bt.q.data() + t * d;
      double mx = -INFINITY;
      for (int s = 0; s <= t; ++s) {
        const double* ks = bt.k.data() + s * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) {
          dot += qt[j] * ks[j];
        }
        row[s] = dot * inv_sqrt_d;
        mx = std::max(mx, row[s]);
      }
      double z = 0.0;
      for (int s = 0; s <= t; ++s) {
        row[s] = std::exp(row[s] - mx);
        z += row[s];
      }
      double* ot = bt.o.data() + t * d;
      for (int s = 0; s <= t; ++s) {
        row[s] /= z;
        const double* vs = bt.v.data() + s * d;
        for (int j = 0; j < d; ++j) {
          ot[j] += row[s] * vs[j];
        }
      }
    }
    std::vector<double> tmp(static_cast<std::size_t>(std::max(d, m)));
    for (int t = 0; t < n; ++t) {
      double* h1 = bt.h1.data() + t * d;
      matvec(p + blk.wo, p + blk.bo, bt.o.data() + t * d, tmp.data(), d, d);
      for (int j = 0; j < d; ++j) {
        h1[j] = bt.x[static_cast<std::size_t>(t * d + j)] + tmp[static_cast<std::size_t>(j)];
      }
      double* act = bt.act.data() + t * m;
      matvec(p + blk.w1, p + blk.b1, h1, act, m, d);
      for (int j = 0; j < m; ++j) {
        act[j] = std::tanh(act[j]);
      }
      matvec(p + blk.w2, p + blk.b2, act, tmp.data(), d, m);
      for (int j = 0; j < d; ++j) {
        x[static_cast<std::size_t>(t * d + j)] = h1[j] + tmp[static_cast<std::size_t>(j)];
      }
    }
  }
  tape.out = std::move(x);
}

void backbone_backward(const ArchConfig& arch, const BackboneLayout& layout, std::span<const double> params,
                       const BackboneTape& tape, std::span<double> d_out, std::span<double> grad) {
  const int n = tape.length;
  const int d = arch.embed_dim;
  const int m = arch.mlp_dim;
  const double* p = params.data();
  double* g = grad.data();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const auto nd = static_cast<std::size_t>(n * d);

  std::vector<double> dy(d_out.begin(), d_out.end());
  std::vector<double> dh1(nd), dx(nd), d_o(nd), dq(nd), dk(nd), dv(nd);
  std::vector<double> dact(static_cast<std::size_t>(m)), da(static_cast<std::size_t>(n));

  for (std::size_t b = layout.blocks.size(); b-- > 0;) {
    const auto& blk = layout.blocks[b];
    const BlockTape& bt = tape.blocks[b];
    // MLP residual: y = h1 + W2 tanh(W1 h1 + b1) + b2
    dh1 = dy;
    for (int t = 0; t < n; ++t) {
      const double* dyt = dy.data() + t * d;
      const double* act = bt.act.data() + t * m;
      for (int j = 0; j < d; ++j) {
        g[blk.b2 + static_cast<std::size_t>(j)] += dyt[j];
      }
      std::fill(dact.begin(), dact.end(), 0.0);
      matvec_backward(p + blk.w2, act, dyt, dact.data(), g + blk.w2, d, m);
      for (int j = 0; j < m; ++j) {
        dact[static_cast<std::size_t>(j)] *= 1.0 - act[j] * act[j];
        g[blk.b1 + static_cast<std::size_t>(j)] += dact[static_cast<std::size_t>(j)];
      }
      matvec_backward(p + blk.w1, bt.h1.data() + t * d, dact.data(), dh1.data() + t * d, g + blk.w1, m, d);
    }
    // Attention residual: h1 = x + Wo o + bo
    dx = dh1;
    std::fill(d_o.begin(), d_o.end(), 0.0);
    for (int t = 0; t < n; ++t) {
      const double* dht = dh1.data() + t * d;
      for (int j = 0; j < d; ++j) {
        g[blk.bo + static_cast<std::size_t>(j)] += dht[j];
      }
      matvec_backward(p + blk.wo, bt.o.data() + t * d, dht, d_o.data() + t * d, g + blk.wo, d, d);
    }
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (int t = 0; t < n; ++t) {
      const double* row = bt.att.data() + t * n;
      const double* dot_t = d_o.data() + t * d;
      double weighted = 0.0;
      for (int s = 0; s <= t; ++s) {
        const double* vs = bt.v.data() + s * d;
        double* dvs = dv.data() + s * d;
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
          acc += dot_t[j] * vs[j];
          dvs[j] += row[s] * dot_t[j];
        }
        da[static_cast<std::size_t>(s)] = acc;
        weighted += row[s] * acc;
      }
      const double* qt = bt.q.data() + t * d;
      double* dqt = dq.data() + t * d;
      for (int s = 0; s <= t; ++s) {
        const double ds = row[s] * (da[static_cast<std::size_t>(s)] - weighted) * inv_sqrt_d;
        const double* ks = bt.k.data() + s * d;
        double* dks = dk.data() + s * d;
        for (int j = 0; j < d; ++j) {
          dqt[j] += ds * ks[j];
          dks[j] += ds * qt[j];
        }
      }
    }
    for (int t = 0; t < n; ++t) {
      const double* xt = bt.x.data() + t * d;
      double* dxt = dx.data() + t * d;
      matvec_backward(p + blk.wq, xt, dq.data() + t * d, dxt, g + blk.wq, d, d);
      matvec_backward(p + blk.wk, xt, dk.data() + t * d, dxt, g + blk.wk, d, d);
      matvec_backward(p + blk.wv, xt, dv.data() + t * d, dxt, g + blk.wv, d, d);
    }
    dy = dx;
  }
  for (int t = 0; t < n; ++t) {
    const auto tok = static_cast<std::size_t>(tape.tokens[static_cast<std::size_t>(t)]);
    double* de = g + layout.tok_emb + tok * static_cast<std::size_t>(d);
    double* dp = g + layout.pos_emb + static_cast<std::size_t>(t * d);
    const double* src = dy.data() + t * d;
    for (int j = 0; j < d; ++j) {
      de[j] += src[j];
      dp[j] += src[j];
    }
  }
}

}  // namespace cwpo
