#pragma once

#include <string_view>

namespace cwpo {

// Weighting rules mapping a weak annotator's scores (s⁺ ≥ s⁻, d = s⁺ − s⁻)
// to a per-example weight:
//   c1        2(σ(d) − 0.5)              in [0, 1)
//   c2        σ(d)                       in [0.5, 1)
//   c3        min{d, 1}
//   c4        min{scale·d, 1}            scale defaults to 0.2
//   pairwise  clamp(2(σ(s⁺) − 0.5), 0, 1), with s⁺ = f(x, y⁺, y⁻)
//   unit      1
enum class ConfidenceKind { c1, c2, c3, c4, pairwise, unit };

struct ConfidenceScheme {
  ConfidenceKind kind = ConfidenceKind::c1;
  double c4_scale = 0.2;

  bool operator==(const ConfidenceScheme&) const = default;
};

ConfidenceScheme parse_confidence_scheme(std::string_view s);
std::string_view to_string(ConfidenceKind k);

// Throws ContractError when s_plus < s_minus or either is non-finite.
double confidence(const ConfidenceScheme& scheme, double s_plus, double s_minus);

// 2(σ(d) − 0.5) for d ≥ 0: zero only at d = 0, strictly below 1, and
// non-decreasing in d.
double normalized_margin(double d);

}  // namespace cwpo
