#include "cwpo/confidence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cwpo/errors.hpp"
#include "cwpo/numerics.hpp"

namespace cwpo {

namespace {

constexpr double kBelowOne = 1.0 - 0x1.0p-53;

}  // namespace

double normalized_margin(double d) {
  // Below the switch the sigmoid form loses all relative precision, so the
  // identical tanh(d/2) is used. Above it the sigmoid form is taken literally
  // (floored at the switch value to stay monotone) so that σ(ln 3) = 3/4
  // yields exactly 0.5.
  constexpr double kSwitch = 0.5;
  double r = 0.0;
  if (d < kSwitch) {
    r = std::tanh(0.5 * d);
    if (d > 0.0 && r == 0.0) {
      r = std::numeric_limits<double>::denorm_min();
    }
  } else {
    r = std::max(2.0 * (sigmoid(d) - 0.5), std::tanh(0.5 * kSwitch));
  }
  return std::min(r, kBelowOne);
}

ConfidenceScheme parse_confidence_scheme(std::string_view s) {
  if (s == "c1") {
    return {ConfidenceKind::c1};
  }
  if (s == "c2") {
    return {ConfidenceKind::c2};
  }
  if (s == "c3") {
    return {ConfidenceKind::c3};
  }
  if (s == "c4") {
    return {ConfidenceKind::c4};
  }
  if (s == "pairwise") {
    return {ConfidenceKind::pairwise};
  }
  if (s == "unit") {
    return {ConfidenceKind::unit};
  }
  throw ArgumentError("unknown confidence scheme \"" + std::string(s) + "\" (expected c1|c2|c3|c4|pairwise|unit)");
}

std::string_view to_string(ConfidenceKind k) {
  switch (k) {
    case ConfidenceKind::c1:
      return "c1";
    case ConfidenceKind::c2:
      return "c2";
    case ConfidenceKind::c3:
      return "c3";
    case ConfidenceKind::c4:
      return "c4";
    case ConfidenceKind::pairwise:
      return "pairwise";
    case ConfidenceKind::unit:
      return "unit";
  }
  return "?";
}

double confidence(const ConfidenceScheme& scheme, double s_plus, double s_minus) {
  if (!std::isfinite(s_plus) || !std::isfinite(s_minus)) {
    throw ContractError("confidence: scores must be finite");
  }
  if (s_plus < s_minus) {
    throw ContractError("confidence: s_plus (" + std::to_string(s_plus) + ") < s_minus (" +
                        std::to_string(s_minus) + ")");
  }
  const double d = s_plus - s_minus;
  switch (scheme.kind) {
    case ConfidenceKind::c1:
      return normalized_margin(d);
    case ConfidenceKind::c2:
      return std::min(sigmoid(d), kBelowOne);
    case ConfidenceKind::c3:
      return std::min(d, 1.0);
    case ConfidenceKind::c4:
      return std::min(scheme.c4_scale * d, 1.0);
    case ConfidenceKind::pairwise:
      return std::clamp(2.0 * (sigmoid(s_plus) - 0.5), 0.0, kBelowOne);
    case ConfidenceKind::unit:
      return 1.0;
  }
  throw ContractError("confidence: unknown scheme");
}

}  // namespace cwpo
