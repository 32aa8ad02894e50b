#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "optimerge/distribution_vectors.hpp"
#include "optimerge/tensor_store.hpp"

namespace optimerge::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "optimerge-test");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

std::vector<float> random_values(std::mt19937_64& rng, std::size_t n, double scale = 1.0);

/// F32 tensors named layers.<i>.<suffix> with random 2-D shapes.
TensorMap random_model(std::mt19937_64& rng, std::size_t tensors, std::size_t max_dim);

/// Same names and shapes as `like`, values perturbed by N(0, scale^2).
TensorMap perturbed(std::mt19937_64& rng, const TensorMap& like, double scale);

/// Random tensors of mixed dtype (F32/F16/BF16) and rank 0..3.
TensorMap random_container(std::mt19937_64& rng, std::size_t tensors);

Tensor f32_tensor(std::vector<float> values, Shape shape);

}  // namespace optimerge::testing
