#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cwpo {

struct ParamEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Named arrays laid out back to back in one flat buffer. Named views and the
// flat view alias the same storage.
class ParamSet {
 public:
  // Appends a zero-filled array; returns its offset in the flat view.
  std::size_t add(const std::string& name, std::vector<std::size_t> shape);

  std::size_t size() const { return flat_.size(); }
  std::span<double> flat() { return flat_; }
  std::span<const double> flat() const { return flat_; }

  const std::vector<ParamEntry>& entries() const { return entries_; }
  const ParamEntry& entry(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::span<double> view(const std::string& name);
  std::span<const double> view(const std::string& name) const;
  std::size_t offset(const std::string& name) const { return entry(name).offset; }

  // Name of the entry owning flat index i.
  const std::string& name_at(std::size_t i) const;

  // Copies every array whose name starts with `prefix` from `src`; shapes
  // must agree. Returns the number of arrays copied.
  std::size_t copy_matching(const ParamSet& src, const std::string& prefix);

  bool operator==(const ParamSet& o) const;

 private:
  std::vector<ParamEntry> entries_;
  std::vector<double> flat_;
};

}  // namespace cwpo
