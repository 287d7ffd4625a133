#include "cwpo/errors.hpp"

#include <cmath>

namespace cwpo {

double check_finite(double v, const char* node) {
  if (!std::isfinite(v)) {
    throw NonFiniteError(node, "value is " + std::to_string(v));
  }
  return v;
}

}  // namespace cwpo
