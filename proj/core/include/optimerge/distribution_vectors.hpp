#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "optimerge/merge_methods.hpp"
#include "optimerge/tensor_store.hpp"
#include "optimerge/weights.hpp"

namespace optimerge {

/// Substring patterns; a tensor is excluded iff its name contains any of them.
struct ExclusionRule {
  std::vector<std::string> patterns;

  /// Embedding, output-head and rotary tensors stay with the base model.
  static ExclusionRule defaults() { return {{"embed_tokens", "lm_head", "rotary"}}; }
  bool excludes(std::string_view name) const;
};

/// Parameter delta of one fine-tuned checkpoint relative to a shared base.
struct DistributionVector {
  TensorMap delta;  // F32
  std::string base_id;
  std::string source_id;
  std::set<std::string, std::less<>> excluded;
  std::vector<std::string> patterns;

  bool operator==(const DistributionVector&) const = default;
};

DistributionVector extract(const TensorMap& fine_tuned, const TensorMap& base, const ExclusionRule& rule,
                           std::string base_id = {}, std::string source_id = {});

struct ComposeOptions {
  std::optional<SparsifierConfig> sparsifier;
  /// Skip sparsification of the IT vector.
  bool exempt_it = false;
  /// Output dtype; defaults to each base tensor's own dtype.
  std::optional<DType> out_dtype;
};

/// base + w_it * S(it) + sum_i w_i * S(vec_i). `weights` holds the IT weight
/// first when `it_vec` is given.
TensorMap compose(const TensorMap& base, const DistributionVector* it_vec, std::span<const DistributionVector> vecs,
                  const WeightVector& weights, const ComposeOptions& options = {});

/// Mixture fractions implied by merge weights: the IT entry (if any) is
/// dropped, negative weights count as zero and the rest are normalized.
std::vector<std::pair<std::string, double>> weights_to_ratios(const WeightVector& weights, bool first_is_it);

/// The container form stores the delta as tensor data and provenance in
/// __metadata__.
TensorMap vector_to_container(const DistributionVector& v);
DistributionVector vector_from_container(TensorMap tm);
void save_vector(const DistributionVector& v, const std::filesystem::path& path);
DistributionVector load_vector(const std::filesystem::path& path);

}  // namespace optimerge
