#pragma once

#include <span>
#include <string_view>
#include <vector>

namespace cwpo {

enum class LossKind { dpo, ipo, rdpo };
enum class Weighting { confidence, unit };
enum class Reduction { mean, sum };

struct LossConfig {
  LossKind kind = LossKind::dpo;
  double beta = 0.5;
  double epsilon = 0.1;  // rdpo only
  Weighting weighting = Weighting::confidence;
  Reduction reduction = Reduction::mean;

  void validate() const;
};

LossKind parse_loss_kind(std::string_view s);
Weighting parse_weighting(std::string_view s);
Reduction parse_reduction(std::string_view s);
std::string_view to_string(LossKind k);
std::string_view to_string(Weighting w);
std::string_view to_string(Reduction r);

// lr_plus = log π_θ(y⁺|x) − log π_ref(y⁺|x); lr_minus likewise for y⁻.
struct LogRatioExample {
  double lr_plus = 0.0;
  double lr_minus = 0.0;
  double confidence = 1.0;
};

using LogRatioBatch = std::vector<LogRatioExample>;

// Unweighted per-example loss and its partials in lr_plus / lr_minus.
struct LossTerm {
  double value = 0.0;
  double d_lr_plus = 0.0;
  double d_lr_minus = 0.0;
};

// rDPO mixing coefficients (1−ε)/(1−2ε) and ε/(1−2ε).
struct RdpoCoefficients {
  double positive;
  double negative;
};
RdpoCoefficients rdpo_coefficients(double epsilon);

// dpo:  −log σ(β(lr⁺ − lr⁻))
// ipo:  (lr⁺ − lr⁻ − 1/(2β))²
// rdpo: −(1−ε)/(1−2ε)·log σ(βΔ⁺) + ε/(1−2ε)·log σ(βΔ⁻), Δ⁺ = lr⁺ − lr⁻, Δ⁻ = −Δ⁺
LossTerm per_example_loss(const LossConfig& cfg, double lr_plus, double lr_minus);

// Reduction over examples of C·ℓ in index order (C ≡ 1 under unit weighting).
// The kind-specific entry points require cfg.kind to match.
double dpo_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg);
double ipo_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg);
double rdpo_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg);

// Dispatches on cfg.kind. When the gradient spans are non-empty they receive
// ∂L/∂lr_plus and ∂L/∂lr_minus per example (weight and reduction included).
double confidence_weighted_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg,
                                std::span<double> d_lr_plus = {}, std::span<double> d_lr_minus = {});

// Weight applied to example e under cfg (its confidence or 1).
double example_weight(const LogRatioExample& e, const LossConfig& cfg);

}  // namespace cwpo
