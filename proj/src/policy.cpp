#include "cwpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cwpo/errors.hpp"

namespace cwpo {
namespace {

PolicyNet declare_policy(ParamSet& params, const ArchConfig& arch) {
  PolicyNet net;
  net.arch = arch;
  net.backbone = declare_backbone(params, arch);
  const auto v = static_cast<std::size_t>(arch.vocab_size);
  const auto d = static_cast<std::size_t>(arch.embed_dim);
  net.head_w = params.add("lm_head.w", {v, d});
  net.head_b = params.add("lm_head.b", {v});
  return net;
}

// Log-softmax of the head applied to hidden row h.
void head_logprobs(const PolicyNet& net, const double* p, const double* h, double* out) {
  const int v = net.arch.vocab_size;
  const int d = net.arch.embed_dim;
  double mx = -INFINITY;
  for (int o = 0; o < v; ++o) {
    const double* row = p + net.head_w + static_cast<std::size_t>(o * d);
    double acc = p[net.head_b + static_cast<std::size_t>(o)];
    for (int j = 0; j < d; ++j) {
      acc += row[j] * h[j];
    }
    out[o] = acc;
    mx = std::max(mx, acc);
  }
  double z = 0.0;
  for (int o = 0; o < v; ++o) {
    z += std::exp(out[o] - mx);
  }
  const double lse = mx + std::log(z);
  for (int o = 0; o < v; ++o) {
    out[o] -= lse;
  }
}

}  // namespace

double policy_logprob(const PolicyNet& net, std::span<const double> params, const Prompt& x, const Response& y,
                      PolicyTape* tape) {
  check_single(net.arch, x, y);
  // The final response token is never an input, so it is left off.
  Tokens enc = x.tokens;
  enc.push_back(net.arch.special(Special::sep));
  enc.insert(enc.end(), y.tokens.begin(), y.tokens.end() - 1);

  PolicyTape local;
  PolicyTape& t = tape ? *tape : local;
  backbone_forward(net.arch, net.backbone, params, enc, t.backbone);
  const int v = net.arch.vocab_size;
  const int d = net.arch.embed_dim;
  const auto n_resp = y.tokens.size();
  t.first_position = static_cast<int>(x.tokens.size());
  t.targets = y.tokens;
  t.probs.assign(n_resp * static_cast<std::size_t>(v), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n_resp; ++i) {
    const double* h = t.backbone.out.data() + (static_cast<std::size_t>(t.first_position) + i) * d;
    double* lp = t.probs.data() + i * static_cast<std::size_t>(v);
    head_logprobs(net, params.data(), h, lp);
    total += lp[y.tokens[i]];
    for (int o = 0; o < v; ++o) {
      lp[o] = std::exp(lp[o]);
    }
  }
  t.logprob = total;
  return check_finite(total, "sequence_logprob");
}

void policy_logprob_backward(const PolicyNet& net, std::span<const double> params, const PolicyTape& tape,
                             double scale, std::span<double> grad) {
  const int v = net.arch.vocab_size;
  const int d = net.arch.embed_dim;
  const double* p = params.data();
  double* g = grad.data();
  std::vector<double> d_out(tape.backbone.out.size(), 0.0);
  std::vector<double> dlogit(static_cast<std::size_t>(v));
  for (std::size_t i = 0; i < tape.targets.size(); ++i) {
    const std::size_t pos = static_cast<std::size_t>(tape.first_position) + i;
    const double* h = tape.backbone.out.data() + pos * d;
    double* dh = d_out.data() + pos * d;
    const double* prob = tape.probs.data() + i * static_cast<std::size_t>(v);
    for (int o = 0; o < v; ++o) {
      dlogit[static_cast<std::size_t>(o)] = scale * ((o == tape.targets[i] ? 1.0 : 0.0) - prob[o]);
    }
    for (int o = 0; o < v; ++o) {
      const double gl = dlogit[static_cast<std::size_t>(o)];
      g[net.head_b + static_cast<std::size_t>(o)] += gl;
      const double* row = p + net.head_w + static_cast<std::size_t>(o * d);
      double* drow = g + net.head_w + static_cast<std::size_t>(o * d);
      for (int j = 0; j < d; ++j) {
        drow[j] += gl * h[j];
        dh[j] += gl * row[j];
      }
    }
  }
  backbone_backward(net.arch, net.backbone, params, tape.backbone, d_out, grad);
}

PolicyModel PolicyModel::create(const ArchConfig& arch, std::uint64_t seed) {
  PolicyModel m;
  m.net_ = declare_policy(m.params_, arch);
  Rng rng(derive_seed(seed, 0x90111c));
  init_backbone(m.params_.flat(), m.net_.backbone, arch, rng);
  const double stddev = 0.5 / std::sqrt(static_cast<double>(arch.embed_dim));
  for (double& w : m.params_.view("lm_head.w")) {
    w = stddev * rng.normal();
  }
  return m;
}

PolicyModel PolicyModel::from_params(const ArchConfig& arch, ParamSet params) {
  PolicyModel m;
  ParamSet expected;
  m.net_ = declare_policy(expected, arch);
  if (expected.entries().size() != params.entries().size()) {
    throw ArgumentError("parameter set does not match a policy of this architecture");
  }
  for (std::size_t i = 0; i < expected.entries().size(); ++i) {
    const auto& a = expected.entries()[i];
    const auto& b = params.entries()[i];
    if (a.name != b.name || a.shape != b.shape) {
      throw ArgumentError("parameter " + b.name + " does not match the policy architecture");
    }
  }
  m.params_ = std::move(params);
  return m;
}

ReferenceSnapshot snapshot_reference(const PolicyModel& model) { return ReferenceSnapshot(model); }

double sequence_logprob(const PolicyModel& model, const Prompt& x, const Response& y) {
  return policy_logprob(model.net(), model.params().flat(), x, y);
}

double sequence_logprob(const ReferenceSnapshot& ref, const Prompt& x, const Response& y) {
  return sequence_logprob(ref.model(), x, y);
}

std::vector<double> next_token_logprobs(const PolicyModel& model, const Prompt& x, const Tokens& partial) {
  const auto& arch = model.arch();
  if (x.tokens.empty()) {
    throw LengthError("prompt must be non-empty");
  }
  Tokens enc = x.tokens;
  enc.push_back(arch.special(Special::sep));
  enc.insert(enc.end(), partial.begin(), partial.end());
  for (std::size_t i = 0; i < enc.size(); ++i) {
    if (i != x.tokens.size() && (enc[i] < 0 || enc[i] >= arch.vocab_size)) {
      throw RangeError("token " + std::to_string(enc[i]) + " out of range");
    }
  }
  BackboneTape tape;
  backbone_forward(arch, model.net().backbone, model.params().flat(), enc, tape);
  std::vector<double> out(static_cast<std::size_t>(arch.vocab_size));
  head_logprobs(model.net(), model.params().flat().data(),
                tape.out.data() + (enc.size() - 1) * static_cast<std::size_t>(arch.embed_dim), out.data());
  return out;
}

Response sample_response(const PolicyModel& model, const Prompt& x, int max_new, double temperature, Rng& rng) {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw ArgumentError("temperature must be finite and non-negative (0 = greedy)");
  }
  const int budget = std::min(max_new, model.arch().max_length - static_cast<int>(x.tokens.size()) - 1);
  Response y;
  std::vector<double> weights;
  for (int step = 0; step < budget; ++step) {
    std::vector<double> lp = next_token_logprobs(model, x, y.tokens);
    int token = 0;
    if (temperature == 0.0) {
      token = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    } else {
      const double mx = *std::max_element(lp.begin(), lp.end());
      weights.resize(lp.size());
      double z = 0.0;
      for (std::size_t i = 0; i < lp.size(); ++i) {
        weights[i] = std::exp((lp[i] - mx) / temperature);
        z += weights[i];
      }
      double u = rng.uniform() * z;
      token = static_cast<int>(lp.size()) - 1;
      for (std::size_t i = 0; i < lp.size(); ++i) {
        u -= weights[i];
        if (u < 0.0) {
          token = static_cast<int>(i);
          break;
        }
      }
    }
    y.tokens.push_back(token);
  }
  return y;
}

OptimConfig fit_schedule(OptimConfig cfg, int epochs, std::size_t n_items, int batch_size) {
  const auto per_epoch = static_cast<int>((n_items + static_cast<std::size_t>(batch_size) - 1) /
                                          static_cast<std::size_t>(batch_size));
  cfg.total_steps = std::max(1, epochs * per_epoch);
  cfg.warmup_steps = std::min(cfg.warmup_steps, cfg.total_steps);
  return cfg;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  if (batch_size < 1) {
    throw ArgumentError("batch_size must be positive");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0xe90c0000ULL + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

double sft_batch_loss(const PolicyNet& net, std::span<const double> params, std::span<const SftPair> pairs,
                      std::span<double> grad, Exec exec) {
  std::size_t tokens = 0;
  for (const auto& p : pairs) {
    tokens += p.response.tokens.size();
  }
  const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1));
  if (grad.empty()) {
    double total = 0.0;
    for (const auto& p : pairs) {
      total += -policy_logprob(net, params, p.prompt, p.response);
    }
    return total * inv;
  }
  double total = batch_value_and_grad(
      pairs.size(),
      [&](std::size_t i, std::span<double> g) {
        PolicyTape tape;
        double lp = policy_logprob(net, params, pairs[i].prompt, pairs[i].response, &tape);
        policy_logprob_backward(net, params, tape, -inv, g);
        return -lp;
      },
      grad, exec);
  return total * inv;
}

TrainTrace sft_train(PolicyModel& model, std::span<const SftPair> pairs, const OptimConfig& cfg,
                     const TrainOptions& opts) {
  TrainTrace trace;
  if (opts.epochs <= 0) {
    return trace;
  }
  if (pairs.empty()) {
    throw ArgumentError("sft_train requires at least one pair");
  }
  const OptimConfig sched = fit_schedule(cfg, opts.epochs, pairs.size(), opts.batch_size);
  sched.validate();
  AdamState state = AdamState::zeros(model.params().size());
  std::vector<double> grad(model.params().size());
  std::vector<SftPair> batch;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    double loss_sum = 0.0;
    auto batches = epoch_batches(pairs.size(), opts.batch_size, opts.seed, epoch);
    for (const auto& idx : batches) {
      batch.clear();
      for (std::size_t i : idx) {
        batch.push_back(pairs[i]);
      }
      try {
        double loss = sft_batch_loss(model.net(), model.params().flat(), batch, grad, opts.exec);
        check_finite(loss, "sft_loss");
        optimizer_step(model.params(), grad, state, trace.steps + 1, sched);
        ++trace.steps;
        loss_sum += loss;
      } catch (const NonFiniteError& e) {
        throw TrainingAborted(e.node(), trace, model.params());
      }
    }
    trace.epochs.push_back({epoch, loss_sum / static_cast<double>(batches.size()), std::nullopt, std::nullopt});
  }
  return trace;
}

Checkpoint policy_checkpoint(const PolicyModel& model, std::uint64_t seed, std::int64_t step) {
  Checkpoint c;
  c.params = model.params();
  c.meta = {{"kind", "policy"}, {"architecture", model.arch().to_json()}, {"seed", seed}, {"step", step}};
  return c;
}

PolicyModel policy_from_checkpoint(const Checkpoint& ckpt, const std::optional<ArchConfig>& expected) {
  if (ckpt.meta.value("kind", "") != "policy") {
    throw IoError("checkpoint is not a policy (kind=" + ckpt.meta.value("kind", std::string("?")) + ")");
  }
  if (!ckpt.meta.contains("architecture")) {
    throw IoError("policy checkpoint lacks an architecture block");
  }
  ArchConfig arch = ArchConfig::from_json(ckpt.meta["architecture"]);
  if (expected && !(*expected == arch)) {
    throw IoError("architecture mismatch: checkpoint has " + arch.to_json().dump() + ", expected " +
                  expected->to_json().dump());
  }
  return PolicyModel::from_params(arch, ckpt.params);
}

}  // namespace cwpo
