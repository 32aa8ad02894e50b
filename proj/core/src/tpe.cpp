#include "optimerge/tpe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "optimerge/error.hpp"
#include "optimerge/rng.hpp"

namespace optimerge {

namespace {

constexpr double kMinBandwidthFraction = 0.01;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double log_sum_exp(std::span<const double> xs) {
  const double m = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

double uniform01(std::mt19937_64& rng) { return to_unit(rng()); }

}  // namespace

double scott_bandwidth(std::span<const double> values, double low, double high) {
  const double range = high - low;
  const double floor = kMinBandwidthFraction * range;
  const auto n = static_cast<double>(values.size());
  if (values.empty()) return floor;
  const double center = 0.5 * (low + high);
  const double mean = (std::accumulate(values.begin(), values.end(), 0.0) + center) / (n + 1.0);
  double ss = range * range / 12.0 + (center - mean) * (center - mean);
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n + 1.0));
  return std::max(sd * std::pow(n, -0.2), floor);
}

double truncated_normal_quantile(double u, double a, double b) {
  const double pa = normal_cdf(a);
  const double pb = normal_cdf(b);
  const double target = pa + u * (pb - pa);
  double lo = a;
  double hi = b;
  for (int i = 0; i < 200 && hi - lo > 1e-14 * (1.0 + std::fabs(lo)); ++i) {
    const double mid = 0.5 * (lo + hi);
    if (normal_cdf(mid) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::clamp(0.5 * (lo + hi), a, b);
}

// --- ParzenEstimator ---------------------------------------------------------------

ParzenEstimator::ParzenEstimator(const SearchSpace& space, std::vector<std::vector<double>> points,
                                 std::optional<double> fixed_bandwidth)
    : dims_(space.dims), points_(std::move(points)) {
  const std::size_t d = dims_.size();
  bandwidths_.resize(d);
  for (std::size_t k = 0; k < d; ++k) {
    if (fixed_bandwidth) {
      bandwidths_[k] = *fixed_bandwidth;
      continue;
    }
    std::vector<double> column;
    column.reserve(points_.size());
    for (const auto& p : points_) column.push_back(p[k]);
    bandwidths_[k] = scott_bandwidth(column, dims_[k].low, dims_[k].high);
  }

  const double log_sqrt_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  log_norm_.resize(points_.size(), std::vector<double>(d));
  for (std::size_t i = 0; i < points_.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double h = bandwidths_[k];
      const double mass =
          normal_cdf((dims_[k].high - points_[i][k]) / h) - normal_cdf((dims_[k].low - points_[i][k]) / h);
      log_norm_[i][k] = std::log(h) + log_sqrt_2pi + std::log(mass);
    }
  }
  log_prior_ = 0.0;
  for (const auto& dim : dims_) log_prior_ -= std::log(dim.high - dim.low);
}

double ParzenEstimator::log_pdf(std::span<const double> x) const {
  std::vector<double> terms;
  terms.reserve(points_.size() + 1);
  for (std::size_t i = 0; i < points_.size(); ++i) {
    double t = 0.0;
    for (std::size_t k = 0; k < dims_.size(); ++k) {
      const double z = (x[k] - points_[i][k]) / bandwidths_[k];
      t += -0.5 * z * z - log_norm_[i][k];
    }
    terms.push_back(t);
  }
  terms.push_back(log_prior_);
  return log_sum_exp(terms) - std::log(static_cast<double>(points_.size() + 1));
}

double ParzenEstimator::marginal_pdf(std::size_t dim, double x) const {
  const auto& d = dims_.at(dim);
  if (x < d.low || x > d.high) return 0.0;
  double sum = 1.0 / (d.high - d.low);
  for (std::size_t i = 0; i < points_.size(); ++i) {
    const double z = (x - points_[i][dim]) / bandwidths_[dim];
    sum += std::exp(-0.5 * z * z - log_norm_[i][dim]);
  }
  return sum / static_cast<double>(points_.size() + 1);
}

std::vector<double> ParzenEstimator::sample(std::mt19937_64& rng) const {
  const std::size_t components = points_.size() + 1;
  const auto pick = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(components));
  const std::size_t c = std::min(pick, components - 1);
  std::vector<double> x(dims_.size());
  for (std::size_t k = 0; k < dims_.size(); ++k) {
    const auto& d = dims_[k];
    const double u = uniform01(rng);
    if (c == points_.size()) {
      x[k] = d.low + u * (d.high - d.low);
    } else {
      const double mu = points_[c][k];
      const double h = bandwidths_[k];
      const double z = truncated_normal_quantile(u, (d.low - mu) / h, (d.high - mu) / h);
      x[k] = std::clamp(mu + h * z, d.low, d.high);
    }
  }
  return x;
}

// --- split and models ---------------------------------------------------------------

TrialSplit split_trials(const Study& study, double gamma) {
  std::vector<std::size_t> scored;
  for (const auto& t : study.trials) {
    if (t.state == TrialState::Scored) scored.push_back(t.index);
  }
  std::stable_sort(scored.begin(), scored.end(), [&](std::size_t a, std::size_t b) {
    return *study.trials[a].score > *study.trials[b].score;
  });
  TrialSplit split;
  if (scored.empty()) return split;
  const auto n_good = std::min<std::size_t>(
      scored.size(), static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(scored.size()) - 1e-12)));
  const std::size_t cut = std::max<std::size_t>(n_good, 1);
  split.good.assign(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(cut));
  split.bad.assign(scored.begin() + static_cast<std::ptrdiff_t>(cut), scored.end());
  split.split_score = *study.trials[split.good.back()].score;
  return split;
}

DensityModelPair fit_density_models(const Study& study) {
  const auto split = split_trials(study, study.sampler.gamma);
  auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::vector<double>> pts;
    pts.reserve(idx.size());
    for (auto i : idx) pts.push_back(study.trials[i].point);
    return pts;
  };
  return DensityModelPair{ParzenEstimator(study.space, gather(split.good), study.sampler.fixed_bandwidth),
                          ParzenEstimator(study.space, gather(split.bad), study.sampler.fixed_bandwidth),
                          split.split_score};
}

double log_ratio(const DensityModelPair& models, std::span<const double> x) {
  return models.good.log_pdf(x) - models.bad.log_pdf(x);
}

std::size_t select_candidate(const DensityModelPair& models, std::span<const std::vector<double>> candidates) {
  if (candidates.empty()) throw Error(Errc::InvalidArgument, "no candidates to select from");
  std::size_t best = 0;
  double best_ratio = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double r = log_ratio(models, candidates[i]);
    if (r > best_ratio) {
      best_ratio = r;
      best = i;
    }
  }
  return best;
}

std::vector<WeightVector> suggest_batch(const Study& study, std::size_t batch) {
  study.space.validate();
  study.sampler.validate();
  if (batch == 0) throw Error(Errc::InvalidArgument, "batch size must be positive");

  const std::size_t batch_id = study.next_batch_id();
  const std::size_t scored = study.scored_count();
  const auto& cfg = study.sampler;

  std::optional<DensityModelPair> models;
  std::vector<WeightVector> out;
  out.reserve(batch);
  for (std::size_t slot = 0; slot < batch; ++slot) {
    std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, batch_id), slot));
    std::vector<double> point;
    if (scored + slot < cfg.n_startup || scored == 0) {
      point.reserve(study.space.dims.size());
      for (const auto& d : study.space.dims) point.push_back(d.low + uniform01(rng) * (d.high - d.low));
    } else {
      if (!models) models.emplace(fit_density_models(study));
      std::vector<std::vector<double>> candidates;
      candidates.reserve(cfg.candidates);
      for (std::size_t c = 0; c < cfg.candidates; ++c) candidates.push_back(models->good.sample(rng));
      point = std::move(candidates[select_candidate(*models, candidates)]);
    }
    out.push_back(study.space.make_point(std::move(point)));
  }
  return out;
}

WeightVector suggest(const Study& study) { return suggest_batch(study, 1).front(); }

}  // namespace optimerge
