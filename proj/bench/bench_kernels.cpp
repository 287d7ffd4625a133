// Serial reference vs OpenMP kernels on the alignment loss and a synthetic
// per-example gradient. Run with OMP_NUM_THREADS to vary the team size.
#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "cwpo/align.hpp"
#include "cwpo/kernels.hpp"
#include "cwpo/policy.hpp"
#include "cwpo/rng.hpp"

namespace {

using namespace cwpo;

std::vector<AnnotatedTriplet> make_batch(std::size_t n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  auto tokens = [&](int len) {
    Tokens t(len);
    for (auto& v : t) {
      v = static_cast<int>(rng.uniform_int(0, vocab - 1));
    }
    return t;
  };
  std::vector<AnnotatedTriplet> out(n);
  for (auto& a : out) {
    a.source = Triplet{Prompt{tokens(5)}, Response{tokens(6)}, Response{tokens(6)}};
    a.confidence = rng.uniform();
  }
  return out;
}

void BM_PolicyLoss(benchmark::State& state, Exec exec) {
  ArchConfig arch;
  arch.vocab_size = 32;
  arch.max_length = 24;
  arch.embed_dim = 32;
  arch.mlp_dim = 64;
  PolicyModel policy = PolicyModel::create(arch, 1);
  const ReferenceSnapshot ref = snapshot_reference(PolicyModel::create(arch, 2));
  const auto batch = make_batch(static_cast<std::size_t>(state.range(0)), arch.vocab_size, 3);
  const ReferenceLogprobs rl = reference_logprobs(ref, batch, Exec::serial);
  std::vector<double> grad(policy.params().size());
  LossConfig cfg;
  for (auto _ : state) {
    double v = policy_preference_loss(policy.net(), policy.params().flat(), batch, rl.chosen, rl.rejected, cfg, grad,
                                      exec);
    benchmark::DoNotOptimize(v);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_BatchGrad(benchmark::State& state, Exec exec) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 4096;
  std::vector<double> grad(dim);
  ExampleTerm term = [&](std::size_t i, std::span<double> g) {
    double s = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
      g[k] = std::sin(static_cast<double>(i * 31 + k));
      s += g[k];
    }
    return s;
  };
  for (auto _ : state) {
    benchmark::DoNotOptimize(batch_value_and_grad(n, term, grad, exec));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK_CAPTURE(BM_PolicyLoss, serial, cwpo::Exec::serial)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_PolicyLoss, parallel, cwpo::Exec::parallel)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_BatchGrad, serial, cwpo::Exec::serial)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK_CAPTURE(BM_BatchGrad, parallel, cwpo::Exec::parallel)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
