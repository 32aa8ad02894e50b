#include "optimerge/distribution_vectors.hpp"

#include <cmath>

#include <json.hpp>

#include "optimerge/error.hpp"

namespace optimerge {

namespace {

constexpr std::string_view kKindKey = "optimerge.kind";
constexpr std::string_view kKindVector = "distribution_vector";

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

}  // namespace

bool ExclusionRule::excludes(std::string_view name) const {
  for (const auto& p : patterns) {
    if (name.find(p) != std::string_view::npos) return true;
  }
  return false;
}

DistributionVector extract(const TensorMap& fine_tuned, const TensorMap& base, const ExclusionRule& rule,
                           std::string base_id, std::string source_id) {
  std::vector<std::string> missing;
  std::vector<std::string> mismatched;
  for (const auto& [name, _] : base.tensors) {
    if (!fine_tuned.contains(name)) missing.push_back(name);
  }
  for (const auto& [name, t] : fine_tuned.tensors) {
    auto it = base.tensors.find(name);
    if (it == base.tensors.end()) {
      missing.push_back(name);
    } else if (it->second.shape != t.shape) {
      mismatched.push_back(name);
    }
  }
  if (!missing.empty()) throw Error(Errc::MissingTensor, "tensors present in only one checkpoint: " + join_names(missing));
  if (!mismatched.empty()) throw Error(Errc::ShapeMismatch, "shape differs for: " + join_names(mismatched));

  DistributionVector v;
  v.base_id = std::move(base_id);
  v.source_id = std::move(source_id);
  v.patterns = rule.patterns;
  for (const auto& [name, bt] : base.tensors) {
    if (rule.excludes(name)) {
      v.excluded.insert(name);
      continue;
    }
    auto tuned = fine_tuned.at(name).to_f32();
    const auto b = bt.to_f32();
    for (std::size_t i = 0; i < tuned.size(); ++i) tuned[i] -= b[i];
    v.delta.insert(name, Tensor::from_f32(tuned, bt.shape, DType::F32));
  }
  return v;
}

TensorMap compose(const TensorMap& base, const DistributionVector* it_vec, std::span<const DistributionVector> vecs,
                  const WeightVector& weights, const ComposeOptions& options) {
  struct Term {
    const DistributionVector* vec;
    double weight;
    std::optional<SparsifierConfig> sparsifier;
  };
  std::vector<Term> terms;
  const std::size_t expected = vecs.size() + (it_vec ? 1 : 0);
  if (weights.size() != expected) {
    throw Error(Errc::WeightCountMismatch,
                "expected " + std::to_string(expected) + " weights, got " + std::to_string(weights.size()));
  }
  if (options.sparsifier) options.sparsifier->validate();

  std::size_t slot = 0;
  auto add_term = [&](const DistributionVector& v, bool is_it) {
    const double w = weights[slot];
    if (!std::isfinite(w)) throw Error(Errc::InvalidArgument, "non-finite weight for '" + weights.names[slot] + "'");
    std::optional<SparsifierConfig> sp;
    if (options.sparsifier && options.sparsifier->method != SparsifierConfig::Method::None &&
        !(is_it && options.exempt_it)) {
      sp = options.sparsifier->for_slot(slot);
    }
    terms.push_back({&v, w, sp});
    ++slot;
  };
  if (it_vec) add_term(*it_vec, true);
  for (const auto& v : vecs) add_term(v, false);

  for (const auto& t : terms) {
    if (t.vec->base_id != terms.front().vec->base_id) {
      throw Error(Errc::BaseMismatch, "vectors '" + terms.front().vec->source_id + "' and '" + t.vec->source_id +
                                          "' were extracted from different bases");
    }
    for (const auto& [name, d] : t.vec->delta.tensors) {
      auto bt = base.tensors.find(name);
      if (bt == base.tensors.end()) throw Error(Errc::BaseMismatch, "vector tensor '" + name + "' is not in the base");
      if (bt->second.shape != d.shape) throw Error(Errc::BaseMismatch, "shape of '" + name + "' differs from the base");
      if (d.dtype != DType::F32) throw Error(Errc::InvalidArgument, "vector tensor '" + name + "' is not F32");
    }
  }

  TensorMap out;
  out.metadata = base.metadata;
  for (const auto& [name, bt] : base.tensors) {
    std::size_t present = 0;
    for (const auto& t : terms) present += t.vec->delta.contains(name) ? 1 : 0;
    const DType dtype = options.out_dtype.value_or(bt.dtype);
    if (present == 0) {
      // Excluded from every vector: carried over from the base untouched.
      out.insert(name, dtype == bt.dtype ? bt : Tensor{dtype, bt.shape, cast_tensor(bt.data, bt.dtype, dtype)});
      continue;
    }
    if (present != terms.size()) {
      throw Error(Errc::BaseMismatch, "tensor '" + name + "' is excluded by some vectors but not others");
    }

    const auto b = bt.to_f32();
    std::vector<double> acc(b.begin(), b.end());
    for (const auto& t : terms) {
      if (t.weight == 0.0) continue;
      const auto d = t.vec->delta.at(name).to_f32();
      if (t.sparsifier) {
        const DareMask mask(*t.sparsifier, name);
        const double scale = t.weight * mask.rescale();
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (d[i] != 0.0f && mask.keep(i)) acc[i] += scale * d[i];
        }
      } else {
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (d[i] != 0.0f) acc[i] += t.weight * d[i];
        }
      }
    }
    std::vector<float> merged(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) merged[i] = static_cast<float>(acc[i]);
    out.insert(name, Tensor::from_f32(merged, bt.shape, dtype));
  }
  return out;
}

std::vector<std::pair<std::string, double>> weights_to_ratios(const WeightVector& weights, bool first_is_it) {
  std::vector<std::pair<std::string, double>> out;
  double total = 0.0;
  for (std::size_t i = first_is_it ? 1 : 0; i < weights.size(); ++i) {
    const double w = std::isfinite(weights[i]) ? std::max(weights[i], 0.0) : 0.0;
    total += w;
    out.emplace_back(weights.names[i], w);
  }
  if (!(total > 0.0)) throw Error(Errc::AllNonPositive, "no strictly positive mixture weight");
  for (auto& [_, w] : out) w /= total;
  return out;
}

TensorMap vector_to_container(const DistributionVector& v) {
  TensorMap tm = v.delta;
  tm.metadata[std::string(kKindKey)] = std::string(kKindVector);
  tm.metadata["base_id"] = v.base_id;
  tm.metadata["source_id"] = v.source_id;
  tm.metadata["exclude_patterns"] = nlohmann::json(v.patterns).dump();
  tm.metadata["excluded"] = nlohmann::json(std::vector<std::string>(v.excluded.begin(), v.excluded.end())).dump();
  return tm;
}

DistributionVector vector_from_container(TensorMap tm) {
  auto field = [&](std::string_view key) -> std::string {
    auto it = tm.metadata.find(key);
    if (it == tm.metadata.end()) {
      throw Error(Errc::MalformedHeader, "distribution vector metadata lacks '" + std::string(key) + "'");
    }
    return it->second;
  };
  if (field(kKindKey) != kKindVector) throw Error(Errc::MalformedHeader, "container is not a distribution vector");

  DistributionVector v;
  v.base_id = field("base_id");
  v.source_id = field("source_id");
  try {
    v.patterns = nlohmann::json::parse(field("exclude_patterns")).get<std::vector<std::string>>();
    for (auto& name : nlohmann::json::parse(field("excluded")).get<std::vector<std::string>>()) {
      v.excluded.insert(std::move(name));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::MalformedHeader, std::string("bad exclusion metadata: ") + e.what());
  }
  for (const auto& name : v.excluded) {
    if (tm.contains(name)) throw Error(Errc::MalformedHeader, "excluded tensor '" + name + "' present in delta");
  }
  tm.metadata.clear();
  v.delta = std::move(tm);
  return v;
}

void save_vector(const DistributionVector& v, const std::filesystem::path& path) {
  write_container(vector_to_container(v), path);
}

DistributionVector load_vector(const std::filesystem::path& path) {
  return vector_from_container(read_container(path));
}

}  // namespace optimerge
