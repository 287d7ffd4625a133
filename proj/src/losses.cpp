#include "cwpo/losses.hpp"

#include <cmath>
#include <string>

#include "cwpo/errors.hpp"
#include "cwpo/numerics.hpp"

namespace cwpo {

void LossConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw ArgumentError("beta must be positive and finite");
  }
  if (kind == LossKind::rdpo && !(epsilon >= 0.0 && epsilon < 0.5)) {
    throw ArgumentError("rdpo epsilon must lie in [0, 0.5), got " + std::to_string(epsilon));
  }
}

LossKind parse_loss_kind(std::string_view s) {
  if (s == "dpo") {
    return LossKind::dpo;
  }
  if (s == "ipo") {
    return LossKind::ipo;
  }
  if (s == "rdpo") {
    return LossKind::rdpo;
  }
  throw ArgumentError("unknown loss kind \"" + std::string(s) + "\" (expected dpo|ipo|rdpo)");
}

Weighting parse_weighting(std::string_view s) {
  if (s == "confidence") {
    return Weighting::confidence;
  }
  if (s == "unit") {
    return Weighting::unit;
  }
  throw ArgumentError("unknown weighting \"" + std::string(s) + "\" (expected confidence|unit)");
}

Reduction parse_reduction(std::string_view s) {
  if (s == "mean") {
    return Reduction::mean;
  }
  if (s == "sum") {
    return Reduction::sum;
  }
  throw ArgumentError("unknown reduction \"" + std::string(s) + "\" (expected mean|sum)");
}

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::dpo:
      return "dpo";
    case LossKind::ipo:
      return "ipo";
    case LossKind::rdpo:
      return "rdpo";
  }
  return "?";
}

std::string_view to_string(Weighting w) { return w == Weighting::unit ? "unit" : "confidence"; }
std::string_view to_string(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }

RdpoCoefficients rdpo_coefficients(double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 0.5)) {
    throw ArgumentError("rdpo epsilon must lie in [0, 0.5), got " + std::to_string(epsilon));
  }
  const double denom = 1.0 - 2.0 * epsilon;
  return {(1.0 - epsilon) / denom, epsilon / denom};
}

LossTerm per_example_loss(const LossConfig& cfg, double lr_plus, double lr_minus) {
  const double beta = cfg.beta;
  switch (cfg.kind) {
    case LossKind::dpo: {
      const double m = beta * (lr_plus - lr_minus);
      const double s = sigmoid(-m);
      return {softplus(-m), -beta * s, beta * s};
    }
    case LossKind::ipo: {
      const double gap = (lr_plus - lr_minus) - 1.0 / (2.0 * beta);
      return {gap * gap, 2.0 * gap, -2.0 * gap};
    }
    case LossKind::rdpo: {
      const auto c = rdpo_coefficients(cfg.epsilon);
      const double delta_plus = lr_plus - lr_minus;
      const double delta_minus = -delta_plus;
      const double value =
          -c.positive * log_sigmoid(beta * delta_plus) + c.negative * log_sigmoid(beta * delta_minus);
      const double d_delta = -c.positive * beta * sigmoid(-beta * delta_plus) - c.negative * beta * sigmoid(beta * delta_plus);
      return {value, d_delta, -d_delta};
    }
  }
  throw ArgumentError("unknown loss kind");
}

double example_weight(const LogRatioExample& e, const LossConfig& cfg) {
  return cfg.weighting == Weighting::unit ? 1.0 : e.confidence;
}

double confidence_weighted_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg,
                                std::span<double> d_lr_plus, std::span<double> d_lr_minus) {
  cfg.validate();
  const bool want_grad = !d_lr_plus.empty();
  if (want_grad && (d_lr_plus.size() != batch.size() || d_lr_minus.size() != batch.size())) {
    throw ArgumentError("gradient spans must match the batch size");
  }
  if (batch.empty()) {
    return 0.0;
  }
  const double scale = cfg.reduction == Reduction::mean ? 1.0 / static_cast<double>(batch.size()) : 1.0;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& e = batch[i];
    if (!std::isfinite(e.lr_plus) || !std::isfinite(e.lr_minus)) {
      throw ContractError("log-ratio batch entry " + std::to_string(i) + " is not finite");
    }
    if (!(e.confidence >= 0.0 && e.confidence <= 1.0)) {
      throw ContractError("confidence of batch entry " + std::to_string(i) + " outside [0,1]");
    }
    const double w = example_weight(e, cfg);
    const LossTerm t = per_example_loss(cfg, e.lr_plus, e.lr_minus);
    total += w * t.value;
    if (want_grad) {
      d_lr_plus[i] = w * t.d_lr_plus * scale;
      d_lr_minus[i] = w * t.d_lr_minus * scale;
    }
  }
  return cfg.reduction == Reduction::mean ? total / static_cast<double>(batch.size()) : total;
}

namespace {

double dispatch_checked(std::span<const LogRatioExample> batch, const LossConfig& cfg, LossKind expected) {
  if (cfg.kind != expected) {
    throw ArgumentError(std::string(to_string(expected)) + "_loss called with kind " + std::string(to_string(cfg.kind)));
  }
  return confidence_weighted_loss(batch, cfg);
}

}  // namespace

double dpo_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg) {
  return dispatch_checked(batch, cfg, LossKind::dpo);
}

double ipo_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg) {
  return dispatch_checked(batch, cfg, LossKind::ipo);
}

double rdpo_loss(std::span<const LogRatioExample> batch, const LossConfig& cfg) {
  return dispatch_checked(batch, cfg, LossKind::rdpo);
}

}  // namespace cwpo
