#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "cwpo/checkpoint.hpp"
#include "cwpo/errors.hpp"
#include "cwpo/kernels.hpp"
#include "cwpo/network.hpp"
#include "cwpo/optim.hpp"
#include "cwpo/params.hpp"
#include "cwpo/prefdata.hpp"
#include "cwpo/rng.hpp"

namespace cwpo {

// Shape of an autoregressive policy: backbone plus a vocabulary projection.
struct PolicyNet {
  ArchConfig arch;
  BackboneLayout backbone;
  std::size_t head_w = 0;  // [vocab, embed_dim]
  std::size_t head_b = 0;  // [vocab]
};

// Forward state for one (prompt, response) pair.
struct PolicyTape {
  BackboneTape backbone;
  std::vector<double> probs;  // response_len × vocab
  Tokens targets;
  int first_position = 0;  // encoded position predicting targets[0]
  double logprob = 0.0;
};

// log π(y|x) = Σᵢ log p(yᵢ | x, y<ᵢ) at the given parameters; fills `tape`
// when non-null so the gradient can follow.
double policy_logprob(const PolicyNet& net, std::span<const double> params, const Prompt& x, const Response& y,
                      PolicyTape* tape = nullptr);
// Accumulates scale · ∇θ log π(y|x) into grad.
void policy_logprob_backward(const PolicyNet& net, std::span<const double> params, const PolicyTape& tape,
                             double scale, std::span<double> grad);

class PolicyModel {
 public:
  static PolicyModel create(const ArchConfig& arch, std::uint64_t seed);
  // Adopts existing parameters; throws if they do not match `arch`.
  static PolicyModel from_params(const ArchConfig& arch, ParamSet params);

  const ArchConfig& arch() const { return net_.arch; }
  const PolicyNet& net() const { return net_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

 private:
  PolicyNet net_;
  ParamSet params_;
};

// Frozen deep copy of a policy. Copies share the same immutable storage.
class ReferenceSnapshot {
 public:
  explicit ReferenceSnapshot(const PolicyModel& source)
      : model_(std::make_shared<const PolicyModel>(source)) {}
  const PolicyModel& model() const { return *model_; }
  const ArchConfig& arch() const { return model_->arch(); }

 private:
  std::shared_ptr<const PolicyModel> model_;
};

ReferenceSnapshot snapshot_reference(const PolicyModel& model);

double sequence_logprob(const PolicyModel& model, const Prompt& x, const Response& y);
double sequence_logprob(const ReferenceSnapshot& ref, const Prompt& x, const Response& y);

// log p(· | x, partial) over the real vocabulary.
std::vector<double> next_token_logprobs(const PolicyModel& model, const Prompt& x, const Tokens& partial);

// Ancestral sampling with temperature scaling; temperature == 0 selects
// greedy argmax decoding (lowest index on ties). Generation stops at
// max_new tokens or when the encoding would exceed max_length.
Response sample_response(const PolicyModel& model, const Prompt& x, int max_new, double temperature, Rng& rng);

struct EpochStat {
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> heldout_agreement;
  std::optional<double> mean_margin;
};

struct TrainTrace {
  std::vector<EpochStat> epochs;
  int steps = 0;
};

// Raised when a training loss turns non-finite. Carries the trace so far and
// the parameters from the last finite step.
class TrainingAborted : public NonFiniteError {
 public:
  TrainingAborted(const std::string& node, TrainTrace trace, ParamSet last_good)
      : NonFiniteError(node, "training aborted"), trace_(std::move(trace)), last_good_(std::move(last_good)) {}
  const TrainTrace& trace() const { return trace_; }
  const ParamSet& last_good() const { return last_good_; }

 private:
  TrainTrace trace_;
  ParamSet last_good_;
};

struct TrainOptions {
  int epochs = 3;
  int batch_size = 16;
  std::uint64_t seed = 0;
  Exec exec = Exec::parallel;
};

// The optimizer's total_steps is set to epochs × batches; warmup is capped at
// that total.
OptimConfig fit_schedule(OptimConfig cfg, int epochs, std::size_t n_items, int batch_size);

// Seeded shuffled mini-batches for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch);

struct SftPair {
  Prompt prompt;
  Response response;
};

// Minimizes the token-mean NLL of responses given prompts (prompt tokens are
// not scored). Trace holds the mean batch loss per epoch.
TrainTrace sft_train(PolicyModel& model, std::span<const SftPair> pairs, const OptimConfig& cfg,
                     const TrainOptions& opts);

// Mini-batch SFT objective on the given pairs, for gradient checking.
double sft_batch_loss(const PolicyNet& net, std::span<const double> params, std::span<const SftPair> pairs,
                      std::span<double> grad, Exec exec);

Checkpoint policy_checkpoint(const PolicyModel& model, std::uint64_t seed, std::int64_t step);
// Throws IoError on a kind tag other than "policy" or, when `expected` is
// given, on an architecture mismatch.
PolicyModel policy_from_checkpoint(const Checkpoint& ckpt, const std::optional<ArchConfig>& expected = std::nullopt);

}  // namespace cwpo
