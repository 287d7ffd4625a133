#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace cwpo {

// Execution mode for the data-parallel kernels. `serial` is the reference
// implementation kept for testing; `parallel` distributes examples over
// OpenMP threads. Both reduce in index order, so results are bit-identical.
enum class Exec { serial, parallel };

Exec parse_exec(std::string_view s);

// Per-example term: writes ∂term_i/∂θ into `grad_i` (zeroed on entry) and
// returns term_i.
using ExampleTerm = std::function<double(std::size_t i, std::span<double> grad_i)>;

// Σ_i term_i and Σ_i ∇term_i, both accumulated in index order on one thread.
// `grad` has the parameter length and is overwritten.
double batch_value_and_grad(std::size_t n, const ExampleTerm& term, std::span<double> grad, Exec exec);

// Evaluates f(i) for i in [0, n) into out[i].
void map_indices(std::size_t n, const std::function<double(std::size_t)>& f, std::span<double> out, Exec exec);

// Runs f(i) for every index with no result; f must only write state owned by i.
void for_indices(std::size_t n, const std::function<void(std::size_t)>& f, Exec exec);

int max_threads();

}  // namespace cwpo
