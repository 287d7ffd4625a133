#include "cwpo/kernels.hpp"

#include <algorithm>
#include <exception>
#include <string>

#include <omp.h>

#include "cwpo/errors.hpp"

namespace cwpo {

Exec parse_exec(std::string_view s) {
  if (s == "serial") {
    return Exec::serial;
  }
  if (s == "parallel") {
    return Exec::parallel;
  }
  throw ArgumentError("unknown exec mode \"" + std::string(s) + "\"");
}

int max_threads() { return omp_get_max_threads(); }

namespace {

// Exceptions cannot cross an OpenMP region; the first one is captured and
// rethrown after the loop.
template <class Body>
void omp_loop(std::size_t n, Body&& body) {
  std::exception_ptr failure;
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(cwpo_kernel_failure)
      if (!failure) {
        failure = std::current_exception();
      }
    }
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
}

}  // namespace

double batch_value_and_grad(std::size_t n, const ExampleTerm& term, std::span<double> grad, Exec exec) {
  const std::size_t p = grad.size();
  std::fill(grad.begin(), grad.end(), 0.0);
  double total = 0.0;
  if (exec == Exec::serial || n <= 1) {
    std::vector<double> scratch(p);
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(scratch.begin(), scratch.end(), 0.0);
      total += term(i, scratch);
      for (std::size_t j = 0; j < p; ++j) {
        grad[j] += scratch[j];
      }
    }
    return total;
  }
  std::vector<double> per_example(n * p, 0.0);
  std::vector<double> values(n, 0.0);
  omp_loop(n, [&](std::size_t i) {
    values[i] = term(i, std::span<double>(per_example).subspan(i * p, p));
  });
  for (std::size_t i = 0; i < n; ++i) {
    total += values[i];
    const double* g = per_example.data() + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      grad[j] += g[j];
    }
  }
  return total;
}

void map_indices(std::size_t n, const std::function<double(std::size_t)>& f, std::span<double> out, Exec exec) {
  if (out.size() < n) {
    throw ArgumentError("map_indices: output span too short");
  }
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = f(i);
    }
    return;
  }
  omp_loop(n, [&](std::size_t i) { out[i] = f(i); });
}

void for_indices(std::size_t n, const std::function<void(std::size_t)>& f, Exec exec) {
  if (exec == Exec::serial) {
    for (std::size_t i = 0; i < n; ++i) {
      f(i);
    }
    return;
  }
  omp_loop(n, f);
}

}  // namespace cwpo
