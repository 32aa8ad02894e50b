#include "optimerge/analysis.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <json.hpp>

#include "optimerge/error.hpp"

namespace optimerge {

namespace {

constexpr std::string_view kKindProjection = "pca_projection";

void require_same_names(const DistributionVector& a, const DistributionVector& b) {
  if (a.delta.tensors.size() != b.delta.tensors.size()) throw Error(Errc::NameMismatch, "vectors hold different tensors");
  for (const auto& [name, t] : a.delta.tensors) {
    auto it = b.delta.tensors.find(name);
    if (it == b.delta.tensors.end()) throw Error(Errc::NameMismatch, "tensor '" + name + "' missing from one vector");
    if (it->second.numel() != t.numel()) throw Error(Errc::NameMismatch, "tensor '" + name + "' differs in size");
  }
}

struct Dots {
  double ab = 0.0, aa = 0.0, bb = 0.0;
};

Dots tensor_dots(const Tensor& a, const Tensor& b) {
  const auto va = a.to_f32();
  const auto vb = b.to_f32();
  Dots d;
  for (std::size_t i = 0; i < va.size(); ++i) {
    d.ab += double{va[i]} * vb[i];
    d.aa += double{va[i]} * va[i];
    d.bb += double{vb[i]} * vb[i];
  }
  return d;
}

double clamp_cos(double c) { return std::clamp(c, -1.0, 1.0); }

std::vector<std::pair<std::string, std::uint64_t>> layout_of(const DistributionVector& v) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  for (const auto& [name, t] : v.delta.tensors) out.emplace_back(name, t.numel());
  return out;
}

void split_store(TensorMap& tm, const std::string& name, const std::vector<double>& values) {
  std::vector<float> hi(values.size()), lo(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    hi[i] = static_cast<float>(values[i]);
    lo[i] = static_cast<float>(values[i] - hi[i]);
  }
  tm.insert(name + ".hi", Tensor::from_f32(hi, Shape{values.size()}));
  tm.insert(name + ".lo", Tensor::from_f32(lo, Shape{values.size()}));
}

std::vector<double> split_load(const TensorMap& tm, const std::string& name) {
  const auto hi = tm.at(name + ".hi").to_f32();
  const auto lo = tm.at(name + ".lo").to_f32();
  if (hi.size() != lo.size()) throw Error(Errc::MalformedHeader, "projection tensor '" + name + "' is inconsistent");
  std::vector<double> out(hi.size());
  for (std::size_t i = 0; i < hi.size(); ++i) out[i] = double{hi[i]} + double{lo[i]};
  return out;
}

}  // namespace

double cosine(const DistributionVector& a, const DistributionVector& b) {
  require_same_names(a, b);
  Dots total;
  for (const auto& [name, t] : a.delta.tensors) {
    const auto d = tensor_dots(t, b.delta.at(name));
    total.ab += d.ab;
    total.aa += d.aa;
    total.bb += d.bb;
  }
  if (total.aa == 0.0 || total.bb == 0.0) throw Error(Errc::ZeroNorm, "cosine of a zero vector is undefined");
  return clamp_cos(total.ab / (std::sqrt(total.aa) * std::sqrt(total.bb)));
}

std::map<std::string, std::optional<double>> layerwise_cosine(const DistributionVector& a,
                                                              const DistributionVector& b) {
  require_same_names(a, b);
  std::map<std::string, std::optional<double>> out;
  for (const auto& [name, t] : a.delta.tensors) {
    const auto d = tensor_dots(t, b.delta.at(name));
    if (d.aa == 0.0 || d.bb == 0.0) {
      out[name] = std::nullopt;
    } else {
      out[name] = clamp_cos(d.ab / (std::sqrt(d.aa) * std::sqrt(d.bb)));
    }
  }
  return out;
}

double l2_norm(const DistributionVector& v) {
  double ss = 0.0;
  for (const auto& [_, t] : v.delta.tensors) {
    for (float x : t.to_f32()) ss += double{x} * x;
  }
  return std::sqrt(ss);
}

SimilarityMatrix pairwise_matrix(std::span<const DistributionVector> vecs, std::vector<std::string> labels) {
  if (vecs.empty()) throw Error(Errc::EmptyVectorList, "need at least one vector");
  if (labels.size() != vecs.size()) throw Error(Errc::InvalidArgument, "one label per vector required");
  const std::size_t n = vecs.size();
  SimilarityMatrix m{std::move(labels), std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0))};
  for (std::size_t i = 0; i < n; ++i) {
    m.values[i][i] = cosine(vecs[i], vecs[i]);
    for (std::size_t j = i + 1; j < n; ++j) {
      m.values[i][j] = m.values[j][i] = cosine(vecs[i], vecs[j]);
    }
  }
  return m;
}

std::vector<std::pair<std::string, double>> norms(std::span<const DistributionVector> vecs,
                                                  const std::vector<std::string>& labels) {
  if (labels.size() != vecs.size()) throw Error(Errc::InvalidArgument, "one label per vector required");
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < vecs.size(); ++i) out.emplace_back(labels[i], l2_norm(vecs[i]));
  return out;
}

DistributionVector svd_sparsify(const DistributionVector& v, const SvdSparsifyConfig& cfg) {
  if (cfg.rank == 0) throw Error(Errc::InvalidArgument, "SVD rank must be positive");
  for (const auto& [name, t] : v.delta.tensors) {
    if (t.shape.size() == 2 && cfg.rank > std::min(t.shape[0], t.shape[1])) {
      throw Error(Errc::RankTooLarge, "rank " + std::to_string(cfg.rank) + " exceeds the dimensions of '" + name + "'");
    }
  }
  DistributionVector out = v;
  for (auto& [name, t] : out.delta.tensors) {
    if (t.shape.size() != 2) continue;
    const auto rows = static_cast<Eigen::Index>(t.shape[0]);
    const auto cols = static_cast<Eigen::Index>(t.shape[1]);
    const auto values = t.to_f32();
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = values[static_cast<std::size_t>(r * cols + c)];
    }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto r = static_cast<Eigen::Index>(cfg.rank);
    const Eigen::MatrixXd approx =
        svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal() * svd.matrixV().leftCols(r).transpose();
    std::vector<float> flat(values.size());
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index c = 0; c < cols; ++c) flat[static_cast<std::size_t>(i * cols + c)] = static_cast<float>(approx(i, c));
    }
    t = Tensor::from_f32(flat, t.shape, t.dtype);
  }
  return out;
}

std::vector<double> flatten(const DistributionVector& v) {
  std::vector<double> out;
  out.reserve(v.delta.parameter_count());
  for (const auto& [_, t] : v.delta.tensors) {
    for (float x : t.to_f32()) out.push_back(x);
  }
  return out;
}

Projection fit_pca(std::span<const DistributionVector> vecs, std::vector<std::string> labels) {
  if (vecs.size() < 2) throw Error(Errc::InvalidArgument, "PCA needs at least two vectors");
  if (labels.size() != vecs.size()) throw Error(Errc::InvalidArgument, "one label per vector required");
  for (std::size_t i = 1; i < vecs.size(); ++i) require_same_names(vecs[0], vecs[i]);

  const auto n = static_cast<Eigen::Index>(vecs.size());
  std::vector<std::vector<double>> rows;
  rows.reserve(vecs.size());
  for (const auto& v : vecs) rows.push_back(flatten(v));
  const std::size_t dim = rows[0].size();

  Projection proj;
  proj.labels = std::move(labels);
  proj.layout = layout_of(vecs[0]);
  proj.mean.assign(dim, 0.0);
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < dim; ++k) proj.mean[k] += r[k];
  }
  for (auto& m : proj.mean) m /= static_cast<double>(n);
  for (auto& r : rows) {
    for (std::size_t k = 0; k < dim; ++k) r[k] -= proj.mean[k];
  }

  Eigen::MatrixXd gram(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      double s = 0.0;
      const auto& a = rows[static_cast<std::size_t>(i)];
      const auto& b = rows[static_cast<std::size_t>(j)];
      for (std::size_t k = 0; k < dim; ++k) s += a[k] * b[k];
      gram(i, j) = gram(j, i) = s;
    }
  }
  const double total = gram.trace();
  if (!(total > 0.0)) throw Error(Errc::DegenerateSpread, "all vectors coincide");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  // Eigenvalues come in ascending order.
  const double tol = 1e-12 * total;
  for (int c = 0; c < 2; ++c) {
    const Eigen::Index col = n - 1 - c;
    const double lambda = col >= 0 ? std::max(eig.eigenvalues()(col), 0.0) : 0.0;
    std::vector<double> comp(dim, 0.0);
    if (lambda > tol) {
      const Eigen::VectorXd u = eig.eigenvectors().col(col);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < dim; ++k) comp[k] += u(i) * r[k];
      }
      proj.explained_variance[c] = lambda / total;
    } else {
      // No spread left: any unit direction orthogonal to the first component.
      const auto& first = proj.basis[0];
      std::size_t axis = 0;
      for (std::size_t k = 1; k < dim; ++k) {
        if (std::fabs(first[k]) < std::fabs(first[axis])) axis = k;
      }
      comp[axis] = 1.0;
      proj.explained_variance[c] = 0.0;
    }
    if (c == 1) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += comp[k] * proj.basis[0][k];
      for (std::size_t k = 0; k < dim; ++k) comp[k] -= dot * proj.basis[0][k];
    }
    double norm = 0.0;
    for (double x : comp) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw Error(Errc::DegenerateSpread, "cannot build an orthonormal basis");
    for (auto& x : comp) x /= norm;
    proj.basis[c] = std::move(comp);
  }

  for (const auto& r : rows) {
    std::array<double, 2> xy{};
    for (int c = 0; c < 2; ++c) {
      for (std::size_t k = 0; k < dim; ++k) xy[c] += r[k] * proj.basis[c][k];
    }
    proj.fit_coords.push_back(xy);
  }
  return proj;
}

std::array<double, 2> project(const Projection& proj, const DistributionVector& v) {
  if (layout_of(v) != proj.layout) throw Error(Errc::NameMismatch, "vector layout differs from the fitted projection");
  const auto x = flatten(v);
  std::array<double, 2> xy{};
  for (int c = 0; c < 2; ++c) {
    for (std::size_t k = 0; k < x.size(); ++k) xy[c] += (x[k] - proj.mean[k]) * proj.basis[c][k];
  }
  return xy;
}

TensorMap projection_to_container(const Projection& proj) {
  TensorMap tm;
  split_store(tm, "pca.mean", proj.mean);
  split_store(tm, "pca.component0", proj.basis[0]);
  split_store(tm, "pca.component1", proj.basis[1]);
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& [name, n] : proj.layout) layout.push_back({name, n});
  tm.metadata["optimerge.kind"] = std::string(kKindProjection);
  tm.metadata["labels"] = nlohmann::json(proj.labels).dump();
  tm.metadata["layout"] = layout.dump();
  tm.metadata["explained_variance"] = nlohmann::json(proj.explained_variance).dump();
  tm.metadata["fit_coords"] = nlohmann::json(proj.fit_coords).dump();
  if (proj.svd_rank) tm.metadata["svd_rank"] = std::to_string(proj.svd_rank);
  return tm;
}

Projection projection_from_container(const TensorMap& tm) {
  auto kind = tm.metadata.find("optimerge.kind");
  if (kind == tm.metadata.end() || kind->second != kKindProjection) {
    throw Error(Errc::MalformedHeader, "container is not a PCA projection");
  }
  Projection proj;
  try {
    proj.labels = nlohmann::json::parse(tm.metadata.at("labels")).get<std::vector<std::string>>();
    for (const auto& e : nlohmann::json::parse(tm.metadata.at("layout"))) {
      proj.layout.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::uint64_t>());
    }
    proj.explained_variance = nlohmann::json::parse(tm.metadata.at("explained_variance")).get<std::array<double, 2>>();
    proj.fit_coords = nlohmann::json::parse(tm.metadata.at("fit_coords")).get<std::vector<std::array<double, 2>>>();
    if (auto r = tm.metadata.find("svd_rank"); r != tm.metadata.end()) proj.svd_rank = std::stoull(r->second);
  } catch (const std::exception& e) {
    throw Error(Errc::MalformedHeader, std::string("bad projection metadata: ") + e.what());
  }
  proj.mean = split_load(tm, "pca.mean");
  proj.basis[0] = split_load(tm, "pca.component0");
  proj.basis[1] = split_load(tm, "pca.component1");
  return proj;
}

}  // namespace optimerge
