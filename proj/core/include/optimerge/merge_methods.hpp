#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "optimerge/tensor_store.hpp"
#include "optimerge/weights.hpp"

namespace optimerge {

struct DistributionVector;

struct SparsifierConfig {
  enum class Method { None, DareRandomDrop };

  Method method = Method::None;
  double drop_rate = 0.1;  // p in [0, 1)
  std::uint64_t seed = 0;

  /// Throws InvalidArgument unless p is in [0, 1).
  void validate() const;
  /// Config for the vector at `slot` of a merge; each slot gets its own stream.
  SparsifierConfig for_slot(std::size_t slot) const;
};

/// Counter-based drop decision for one tensor: element i is kept iff the
/// hash of (seed, tensor name, i) maps to a uniform >= p.
class DareMask {
 public:
  DareMask(const SparsifierConfig& cfg, std::string_view tensor_name);

  bool keep(std::uint64_t index) const noexcept;
  /// 1 / (1 - p)
  double rescale() const noexcept { return rescale_; }

 private:
  std::uint64_t key_;
  double drop_rate_;
  double rescale_;
};

/// Drop-and-rescale every tensor of an F32 delta.
TensorMap dare_sparsify(const TensorMap& delta, const SparsifierConfig& cfg);

struct TiesConfig {
  double density = 0.2;        // k in (0, 1]
  std::vector<double> weights;  // one per vector; empty means all 1

  void validate(std::size_t vector_count) const;
};

/// Number of elements kept by the trim step for a tensor of `numel` elements.
std::uint64_t ties_keep_count(double density, std::uint64_t numel);

/// Zeroes all but the top-ceil(k*d) magnitudes (stable on ties: lower index wins).
std::vector<float> ties_trim(std::span<const float> values, double density);

/// Sign election and disjoint weighted mean over already-trimmed values.
/// `trimmed[v][i]` is element i of vector v. Zero sign sums elect positive.
std::vector<float> ties_combine(std::span<const std::vector<float>> trimmed, std::span<const double> weights);

TensorMap ties_merge(const TensorMap& base, std::span<const DistributionVector* const> vecs, const TiesConfig& cfg,
                     std::optional<DType> out_dtype = std::nullopt);

enum class MergeMethod { TaskArithmetic, Ties, DareLinear, DareTies };

std::string_view method_name(MergeMethod m) noexcept;
/// Accepts task_arithmetic, ties, dare_linear, dare_ties.
MergeMethod parse_method(std::string_view name);

struct MergeParams {
  double drop_rate = 0.1;
  double density = 0.2;
  std::uint64_t seed = 0;
  bool exempt_it = false;
  std::optional<DType> out_dtype;
};

/// One of the four baseline recipes. `weights` has the IT weight first when
/// `it_vec` is given.
TensorMap merge_recipe(MergeMethod method, const TensorMap& base, const DistributionVector* it_vec,
                       std::span<const DistributionVector> vecs, const WeightVector& weights,
                       const MergeParams& params);

/// Every weight 1 / (number of vectors).
WeightVector uniform_weights(std::vector<std::string> names);

}  // namespace optimerge
