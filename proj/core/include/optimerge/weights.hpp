#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace optimerge {

/// A candidate merge-weight point. Entries are aligned with the search space
/// dimensions; when an IT vector takes part, its weight comes first.
struct WeightVector {
  std::vector<std::string> names;
  std::vector<double> values;

  WeightVector() = default;
  WeightVector(std::vector<std::string> n, std::vector<double> v) : names(std::move(n)), values(std::move(v)) {}
  /// Names the entries w0, w1, ...
  explicit WeightVector(std::vector<double> v);

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }

  friend bool operator==(const WeightVector&, const WeightVector&) = default;
};

inline WeightVector::WeightVector(std::vector<double> v) : values(std::move(v)) {
  names.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) names.push_back("w" + std::to_string(i));
}

}  // namespace optimerge
