#include "cwpo/params.hpp"

#include <algorithm>
#include <cstring>
#include <functional>
#include <numeric>

#include "cwpo/errors.hpp"

namespace cwpo {

std::size_t ParamSet::add(const std::string& name, std::vector<std::size_t> shape) {
  if (contains(name)) {
    throw ArgumentError("duplicate parameter name " + name);
  }
  std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  ParamEntry e{name, std::move(shape), flat_.size(), n};
  flat_.resize(flat_.size() + n, 0.0);
  entries_.push_back(std::move(e));
  return entries_.back().offset;
}

const ParamEntry& ParamSet::entry(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) {
      return e;
    }
  }
  throw ArgumentError("unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.name == name; });
}

std::span<double> ParamSet::view(const std::string& name) {
  const auto& e = entry(name);
  return std::span<double>(flat_).subspan(e.offset, e.size);
}

std::span<const double> ParamSet::view(const std::string& name) const {
  const auto& e = entry(name);
  return std::span<const double>(flat_).subspan(e.offset, e.size);
}

const std::string& ParamSet::name_at(std::size_t i) const {
  for (const auto& e : entries_) {
    if (i >= e.offset && i < e.offset + e.size) {
      return e.name;
    }
  }
  throw ArgumentError("flat index " + std::to_string(i) + " out of range");
}

std::size_t ParamSet::copy_matching(const ParamSet& src, const std::string& prefix) {
  std::size_t copied = 0;
  for (const auto& e : entries_) {
    if (e.name.rfind(prefix, 0) != 0) {
      continue;
    }
    const auto& s = src.entry(e.name);
    if (s.shape != e.shape) {
      throw ArgumentError("shape mismatch copying " + e.name);
    }
    std::copy_n(src.flat_.begin() + static_cast<std::ptrdiff_t>(s.offset), e.size,
                flat_.begin() + static_cast<std::ptrdiff_t>(e.offset));
    ++copied;
  }
  return copied;
}

bool ParamSet::operator==(const ParamSet& o) const {
  if (entries_.size() != o.entries_.size() || flat_.size() != o.flat_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != o.entries_[i].name || entries_[i].shape != o.entries_[i].shape) {
      return false;
    }
  }
  return flat_.empty() || std::memcmp(flat_.data(), o.flat_.data(), flat_.size() * sizeof(double)) == 0;
}

}  // namespace cwpo
