#include "cwpo/prefdata.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "cwpo/errors.hpp"
#include "cwpo/numerics.hpp"

namespace cwpo {

std::vector<PreferenceTriplet> DatasetSplit::evaluation_view() const {
  std::vector<PreferenceTriplet> out;
  out.reserve(unlabeled.size());
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    const Triplet& t = unlabeled[i];
    std::optional<Choice> gold;
    if (i < evaluation.gold_labels.size()) {
      gold = evaluation.gold_labels[i];
    }
    out.push_back({t.prompt, t.response_a, t.response_b, gold});
  }
  return out;
}

std::size_t ceil_count(double fraction, std::size_t n) {
  double raw = fraction * static_cast<double>(n);
  double k = std::ceil(raw - 1e-9 * std::max(1.0, raw));
  if (k < 0.0) {
    return 0;
  }
  return std::min(n, static_cast<std::size_t>(k));
}

DatasetSplit split_dataset(std::span<const PreferenceTriplet> data, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ArgumentError("split ratio must lie in (0,1), got " + std::to_string(ratio));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!data[i].human_label) {
      throw ArgumentError("split_dataset requires labeled input; item " + std::to_string(i) + " has no label");
    }
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5b117));
  rng.shuffle(std::span<std::size_t>(order));

  DatasetSplit split;
  split.split_ratio = ratio;
  split.seed = seed;
  std::size_t n_labeled = ceil_count(ratio, data.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const PreferenceTriplet& item = data[order[k]];
    if (k < n_labeled) {
      split.labeled.push_back(item);
    } else {
      split.unlabeled.push_back(item.unlabeled());
      split.evaluation.gold_labels.push_back(*item.human_label);
    }
  }
  return split;
}

double human_label_probability(double r_a, double r_b, double flip_noise) {
  double p = sigmoid(r_a - r_b);
  return (1.0 - flip_noise) * p + flip_noise * (1.0 - p);
}

Choice sample_human_label(double r_a, double r_b, Rng& rng, double flip_noise) {
  if (!(flip_noise >= 0.0 && flip_noise < 0.5)) {
    throw ArgumentError("flip_noise must lie in [0, 0.5), got " + std::to_string(flip_noise));
  }
  if (!std::isfinite(r_a) || !std::isfinite(r_b)) {
    throw ArgumentError("rewards must be finite");
  }
  return rng.uniform() < human_label_probability(r_a, r_b, flip_noise) ? Choice::A : Choice::B;
}

std::string_view to_string(Choice c) { return c == Choice::A ? "a" : "b"; }

}  // namespace cwpo
