#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "optimerge/distribution_vectors.hpp"

namespace optimerge {

/// Cosine similarity over the concatenation of all tensors (F64 accumulation).
/// Throws NameMismatch when the tensor sets differ, ZeroNorm for a zero vector.
double cosine(const DistributionVector& a, const DistributionVector& b);

/// Per-tensor cosine; tensors where either side has zero norm map to nullopt.
std::map<std::string, std::optional<double>> layerwise_cosine(const DistributionVector& a,
                                                              const DistributionVector& b);

double l2_norm(const DistributionVector& v);

struct SimilarityMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;
};

SimilarityMatrix pairwise_matrix(std::span<const DistributionVector> vecs, std::vector<std::string> labels);
std::vector<std::pair<std::string, double>> norms(std::span<const DistributionVector> vecs,
                                                  const std::vector<std::string>& labels);

struct SvdSparsifyConfig {
  std::size_t rank = 16;
};

/// Replaces each 2-D tensor by its best rank-r approximation; other tensors
/// pass through. Throws RankTooLarge if r exceeds min(rows, cols) of any
/// matrix, InvalidArgument for r = 0.
DistributionVector svd_sparsify(const DistributionVector& v, const SvdSparsifyConfig& cfg);

/// Two-component PCA basis over flattened vectors.
struct Projection {
  std::vector<std::string> labels;  // fit-set labels
  std::vector<std::pair<std::string, std::uint64_t>> layout;  // tensor name, element count
  std::vector<double> mean;
  std::array<std::vector<double>, 2> basis;
  std::array<double, 2> explained_variance{};
  std::vector<std::array<double, 2>> fit_coords;
  /// Rank of the SVD sparsification applied before fitting; 0 when none.
  /// Callers projecting new vectors apply the same rank first.
  std::size_t svd_rank = 0;
};

/// Fits the top two principal components of >= 2 vectors through the N x N
/// Gram matrix. Throws DegenerateSpread when all vectors coincide.
Projection fit_pca(std::span<const DistributionVector> vecs, std::vector<std::string> labels);

std::array<double, 2> project(const Projection& proj, const DistributionVector& v);

/// Container form: mean and basis stored as hi/lo F32 pairs (hi + lo recovers
/// the double to ~48 bits); labels, layout and variances in __metadata__.
TensorMap projection_to_container(const Projection& proj);
Projection projection_from_container(const TensorMap& tm);

/// Flattens tensors in name order into F64.
std::vector<double> flatten(const DistributionVector& v);

}  // namespace optimerge
