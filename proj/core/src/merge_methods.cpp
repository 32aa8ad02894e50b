#include "optimerge/merge_methods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "optimerge/distribution_vectors.hpp"
#include "optimerge/error.hpp"
#include "optimerge/rng.hpp"

namespace optimerge {

void SparsifierConfig::validate() const {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
    throw Error(Errc::InvalidArgument, "drop rate must lie in [0, 1), got " + std::to_string(drop_rate));
  }
}

SparsifierConfig SparsifierConfig::for_slot(std::size_t slot) const {
  SparsifierConfig cfg = *this;
  cfg.seed = mix_seed(seed, slot);
  return cfg;
}

DareMask::DareMask(const SparsifierConfig& cfg, std::string_view tensor_name)
    : key_(mix_seed(cfg.seed, fnv1a64(tensor_name))), drop_rate_(cfg.drop_rate), rescale_(1.0 / (1.0 - cfg.drop_rate)) {
  cfg.validate();
}

bool DareMask::keep(std::uint64_t index) const noexcept {
  if (drop_rate_ <= 0.0) return true;
  return to_unit(mix_seed(key_, index)) >= drop_rate_;
}

TensorMap dare_sparsify(const TensorMap& delta, const SparsifierConfig& cfg) {
  cfg.validate();
  if (cfg.method == SparsifierConfig::Method::None) return delta;
  TensorMap out;
  out.metadata = delta.metadata;
  for (const auto& [name, t] : delta.tensors) {
    const DareMask mask(cfg, name);
    auto values = t.to_f32();
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = mask.keep(i) ? static_cast<float>(values[i] * mask.rescale()) : 0.0f;
    }
    out.insert(name, Tensor::from_f32(values, t.shape, DType::F32));
  }
  return out;
}

// --- TIES -------------------------------------------------------------------------

void TiesConfig::validate(std::size_t vector_count) const {
  if (!(density > 0.0 && density <= 1.0)) {
    throw Error(Errc::InvalidArgument, "TIES density must lie in (0, 1], got " + std::to_string(density));
  }
  if (!weights.empty() && weights.size() != vector_count) {
    throw Error(Errc::WeightCountMismatch, "TIES expects " + std::to_string(vector_count) + " weights, got " +
                                               std::to_string(weights.size()));
  }
  for (double w : weights) {
    if (!std::isfinite(w)) throw Error(Errc::InvalidArgument, "non-finite TIES weight");
  }
}

std::uint64_t ties_keep_count(double density, std::uint64_t numel) {
  if (numel == 0) return 0;
  // The epsilon absorbs representation error such as 0.3 * 10 = 3.0000000000000004.
  const double raw = std::ceil(density * static_cast<double>(numel) - 1e-9);
  return std::clamp<std::uint64_t>(static_cast<std::uint64_t>(std::max(raw, 1.0)), 1, numel);
}

std::vector<float> ties_trim(std::span<const float> values, double density) {
  const std::uint64_t keep = ties_keep_count(density, values.size());
  std::vector<float> out(values.size(), 0.0f);
  if (keep == values.size()) {
    std::copy(values.begin(), values.end(), out.begin());
    return out;
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto by_magnitude = [&](std::size_t a, std::size_t b) {
    const float ma = std::fabs(values[a]);
    const float mb = std::fabs(values[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), by_magnitude);
  for (std::uint64_t i = 0; i < keep; ++i) out[order[i]] = values[order[i]];
  return out;
}

std::vector<float> ties_combine(std::span<const std::vector<float>> trimmed, std::span<const double> weights) {
  if (trimmed.empty()) return {};
  const std::size_t n = trimmed.front().size();
  std::vector<float> out(n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t v = 0; v < trimmed.size(); ++v) sum += weights[v] * trimmed[v][i];
    const bool positive = sum >= 0.0;
    double num = 0.0;
    double den = 0.0;
    for (std::size_t v = 0; v < trimmed.size(); ++v) {
      const float x = trimmed[v][i];
      if (x == 0.0f || (x > 0.0f) != positive) continue;
      num += weights[v] * x;
      den += weights[v];
    }
    out[i] = den != 0.0 ? static_cast<float>(num / den) : 0.0f;
  }
  return out;
}

TensorMap ties_merge(const TensorMap& base, std::span<const DistributionVector* const> vecs, const TiesConfig& cfg,
                     std::optional<DType> out_dtype) {
  if (vecs.empty()) throw Error(Errc::EmptyVectorList, "TIES needs at least one vector");
  cfg.validate(vecs.size());
  std::vector<double> weights = cfg.weights;
  if (weights.empty()) weights.assign(vecs.size(), 1.0);
  for (const auto* v : vecs) {
    if (v->base_id != vecs.front()->base_id) throw Error(Errc::BaseMismatch, "vectors come from different bases");
    for (const auto& [name, d] : v->delta.tensors) {
      auto bt = base.tensors.find(name);
      if (bt == base.tensors.end() || bt->second.shape != d.shape) {
        throw Error(Errc::BaseMismatch, "vector tensor '" + name + "' does not match the base");
      }
    }
  }

  TensorMap out;
  out.metadata = base.metadata;
  for (const auto& [name, bt] : base.tensors) {
    const DType dtype = out_dtype.value_or(bt.dtype);
    std::size_t present = 0;
    for (const auto* v : vecs) present += v->delta.contains(name) ? 1 : 0;
    if (present == 0) {
      out.insert(name, dtype == bt.dtype ? bt : Tensor{dtype, bt.shape, cast_tensor(bt.data, bt.dtype, dtype)});
      continue;
    }
    if (present != vecs.size()) {
      throw Error(Errc::BaseMismatch, "tensor '" + name + "' is excluded by some vectors but not others");
    }
    std::vector<std::vector<float>> trimmed;
    trimmed.reserve(vecs.size());
    for (const auto* v : vecs) trimmed.push_back(ties_trim(v->delta.at(name).to_f32(), cfg.density));
    const auto merged_delta = ties_combine(trimmed, weights);
    auto values = bt.to_f32();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (merged_delta[i] != 0.0f) values[i] = static_cast<float>(double{values[i]} + merged_delta[i]);
    }
    out.insert(name, Tensor::from_f32(values, bt.shape, dtype));
  }
  return out;
}

// --- recipes -------------------------------------------------------------------------

std::string_view method_name(MergeMethod m) noexcept {
  switch (m) {
    case MergeMethod::TaskArithmetic: return "task_arithmetic";
    case MergeMethod::Ties: return "ties";
    case MergeMethod::DareLinear: return "dare_linear";
    case MergeMethod::DareTies: return "dare_ties";
  }
  return "task_arithmetic";
}

MergeMethod parse_method(std::string_view name) {
  for (auto m : {MergeMethod::TaskArithmetic, MergeMethod::Ties, MergeMethod::DareLinear, MergeMethod::DareTies}) {
    if (method_name(m) == name) return m;
  }
  throw Error(Errc::InvalidArgument, "unknown merge method '" + std::string(name) + "'");
}

TensorMap merge_recipe(MergeMethod method, const TensorMap& base, const DistributionVector* it_vec,
                       std::span<const DistributionVector> vecs, const WeightVector& weights,
                       const MergeParams& params) {
  const SparsifierConfig dare{SparsifierConfig::Method::DareRandomDrop, params.drop_rate, params.seed};
  switch (method) {
    case MergeMethod::TaskArithmetic:
      return compose(base, it_vec, vecs, weights, {std::nullopt, false, params.out_dtype});
    case MergeMethod::DareLinear:
      return compose(base, it_vec, vecs, weights, {dare, params.exempt_it, params.out_dtype});
    case MergeMethod::Ties:
    case MergeMethod::DareTies: break;
  }

  const std::size_t expected = vecs.size() + (it_vec ? 1 : 0);
  if (weights.size() != expected) {
    throw Error(Errc::WeightCountMismatch,
                "expected " + std::to_string(expected) + " weights, got " + std::to_string(weights.size()));
  }
  std::vector<const DistributionVector*> all;
  if (it_vec) all.push_back(it_vec);
  for (const auto& v : vecs) all.push_back(&v);

  std::vector<DistributionVector> sparsified;
  if (method == MergeMethod::DareTies) {
    sparsified.reserve(all.size());
    for (std::size_t slot = 0; slot < all.size(); ++slot) {
      DistributionVector v = *all[slot];
      if (!(it_vec && slot == 0 && params.exempt_it)) v.delta = dare_sparsify(v.delta, dare.for_slot(slot));
      sparsified.push_back(std::move(v));
    }
    for (std::size_t slot = 0; slot < all.size(); ++slot) all[slot] = &sparsified[slot];
  }
  return ties_merge(base, all, TiesConfig{params.density, weights.values}, params.out_dtype);
}

WeightVector uniform_weights(std::vector<std::string> names) {
  const std::size_t n = names.size();
  return WeightVector(std::move(names), std::vector<double>(n, n ? 1.0 / static_cast<double>(n) : 0.0));
}

}  // namespace optimerge
