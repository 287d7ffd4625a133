#pragma once

#include <cmath>

namespace cwpo {

// log(1 + e^z) without overflow for large z or underflow for very negative z.
inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  double e = std::exp(z);
  return e / (1.0 + e);
}

// log σ(z) = -softplus(-z); finite for every finite z.
inline double log_sigmoid(double z) { return -softplus(-z); }

}  // namespace cwpo
