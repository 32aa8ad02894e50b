#pragma once

// Tree-structured Parzen estimator: the scored trials are split at the top-gamma
// quantile into a good and a bad set, each set is modelled by a kernel density
// on the bounded search box, and candidates drawn from the good density are
// ranked by the ratio good/bad.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "optimerge/study.hpp"
#include "optimerge/weights.hpp"

namespace optimerge {

/// Mixture of (n + 1) equally weighted components: one kernel per observed
/// point, each a product of per-dimension truncated Gaussians, plus the
/// uniform prior over the box.
class ParzenEstimator {
 public:
  ParzenEstimator(const SearchSpace& space, std::vector<std::vector<double>> points,
                  std::optional<double> fixed_bandwidth = std::nullopt);

  double log_pdf(std::span<const double> x) const;
  /// Marginal density along one dimension. Integrates to 1 over [low, high].
  double marginal_pdf(std::size_t dim, double x) const;
  std::vector<double> sample(std::mt19937_64& rng) const;

  std::size_t size() const noexcept { return points_.size(); }
  const std::vector<double>& bandwidths() const noexcept { return bandwidths_; }

 private:
  std::vector<Dimension> dims_;
  std::vector<std::vector<double>> points_;
  std::vector<double> bandwidths_;  // per dimension
  // Per point and dimension: log of the truncation mass times the bandwidth
  // times sqrt(2 pi), i.e. the kernel's log normalizer.
  std::vector<std::vector<double>> log_norm_;
  double log_prior_ = 0.0;
};

/// Per-dimension Scott bandwidth: the standard deviation of the mixture formed
/// by the points and the uniform prior, times n^(-1/5), floored at 1% of the
/// dimension's range.
double scott_bandwidth(std::span<const double> values, double low, double high);

/// Truncated standard-normal inverse CDF sample on [a, b] (in z units).
double truncated_normal_quantile(double u, double a, double b);

struct TrialSplit {
  std::vector<std::size_t> good;  // trial indices, best first
  std::vector<std::size_t> bad;
  double split_score = 0.0;  // lowest score admitted to the good set
};

/// Top ceil(gamma * N) Scored trials by score form the good set; equal scores
/// rank the lower trial index first. Failed and pending trials are ignored.
TrialSplit split_trials(const Study& study, double gamma);

struct DensityModelPair {
  ParzenEstimator good;
  ParzenEstimator bad;
  double split_score;
};

DensityModelPair fit_density_models(const Study& study);

/// log good(x) - log bad(x)
double log_ratio(const DensityModelPair& models, std::span<const double> x);

/// Index of the candidate with the largest good/bad ratio (first on ties).
std::size_t select_candidate(const DensityModelPair& models, std::span<const std::vector<double>> candidates);

/// B suggestions against the study's current state. Slot j of the batch is a
/// seeded uniform draw while fewer than n_startup trials would precede it,
/// otherwise the best of `candidates` draws from the frozen good density.
/// Deterministic in (study, B, batch id).
std::vector<WeightVector> suggest_batch(const Study& study, std::size_t batch);
WeightVector suggest(const Study& study);

}  // namespace optimerge
