#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "optimerge/evaluator.hpp"
#include "optimerge/study.hpp"
#include "optimerge/tpe.hpp"

namespace optimerge {

struct SearchOptions {
  std::size_t trials = 100;  // T
  std::size_t top_k = 3;     // K
  std::size_t parallel = 1;  // concurrent evaluations within a batch
  std::size_t proxy_budget = kDefaultProxyBudget;
  std::size_t dev_budget = kDefaultDevBudget;
  /// Per-evaluation working directories are created below this root.
  std::filesystem::path workdir_root;
  bool keep_workdirs = false;
  /// Stop once this many trials are recorded, leaving the study resumable.
  std::optional<std::size_t> stop_after;
};

struct SearchReport {
  bool completed = false;
  WeightVector best;
  std::size_t best_index = 0;
  double best_proxy = 0.0;
  std::optional<double> best_dev;
  std::vector<std::size_t> top_k;  // trial indices, best proxy first
  double search_ms = 0.0;
  double reeval_ms = 0.0;
  double merge_ms = 0.0;  // summed over all evaluations in this run
  double eval_ms = 0.0;
};

/// Batched TPE search followed by top-K re-evaluation in dev mode. Batch b
/// holds trials [b*B, (b+1)*B) with B = study.batch_size, so a study cut off
/// at any trial resumes onto the same trajectory. Failed evaluations are
/// recorded as failed trials; a batch in which every evaluation fails raises
/// BatchExhausted.
SearchReport run_search(Study& study, Evaluator& evaluator, const SearchOptions& options, StudyLog* log = nullptr);

/// Scored trials ranked by proxy score (ties: lower index), first k.
std::vector<std::size_t> top_trials(const Study& study, std::size_t k);

/// Running maximum of proxy scores by trial index (nullopt before the first
/// scored trial).
std::vector<std::optional<double>> best_so_far(const Study& study);

struct GridResult {
  WeightVector best;
  double best_score = 0.0;
  std::vector<Trial> trials;
};

/// Number of grid points G^dims, or nullopt if it exceeds `cap`.
std::optional<std::size_t> grid_size(std::size_t dims, std::size_t points, std::size_t cap);

/// Full Cartesian grid of `points` equispaced values per dimension, endpoints
/// included, last dimension varying fastest. Throws BudgetOverflow above `cap`.
GridResult grid_search(const SearchSpace& space, Evaluator& evaluator, std::size_t points,
                       std::size_t cap = 1'000'000, std::size_t proxy_budget = kDefaultProxyBudget);

}  // namespace optimerge
