#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "optimerge/distribution_vectors.hpp"
#include "optimerge/merge_methods.hpp"
#include "optimerge/weights.hpp"

namespace optimerge {

enum class EvalMode { Proxy, Dev };

std::string_view to_string(EvalMode mode) noexcept;

inline constexpr std::size_t kDefaultProxyBudget = 100;
inline constexpr std::size_t kDefaultDevBudget = 300;

struct EvalRequest {
  WeightVector point;
  EvalMode mode = EvalMode::Proxy;
  std::size_t sample_budget = kDefaultProxyBudget;
  std::filesystem::path workdir;
  std::size_t trial_index = 0;
};

struct EvalResult {
  double score = 0.0;  // higher is better
  std::optional<std::map<std::string, double>> sub_scores;
  double wall_ms = 0.0;
  double merge_ms = 0.0;  // time spent building the merged checkpoint, if any
};

/// Black-box score of a merge-weight point. Implementations throw Error on
/// failure; the search records that as a failed trial.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual EvalResult evaluate(const EvalRequest& request) = 0;
  /// Whether evaluate() may be called from several threads at once.
  virtual bool concurrent_safe() const { return true; }
};

// --- external command ------------------------------------------------------------

struct ExternalCommand {
  /// Placeholders {model}, {mode} and {budget} are substituted verbatim.
  std::string command_template;
  std::chrono::milliseconds timeout{std::chrono::hours(1)};
};

std::string substitute_command(std::string_view command_template, const std::filesystem::path& model,
                               EvalMode mode, std::size_t budget);

/// Parses the final line of an evaluator's standard output: either a bare
/// decimal or {"score": x, "sub_scores": {...}}. A single trailing newline is
/// not treated as an extra (empty) line.
EvalResult parse_evaluator_output(std::string_view stdout_text);

/// Runs the substituted command through /bin/sh in request.workdir with
/// OPTIMERGE_MODE and OPTIMERGE_BUDGET set. Nonzero exit raises
/// EvaluatorFailed; overrunning the timeout kills the process group and raises
/// Timeout.
EvalResult evaluate_external(const EvalRequest& request, const std::filesystem::path& merged_path,
                             const ExternalCommand& command);

// --- synthetic objectives -------------------------------------------------------------

/// Narrow ridge in the IT weight, CPT weights best at zero:
/// exp(-((w_it - center) / width)^2) * prod_i exp(-(w_i / cpt_scale)^2).
struct SharpRidge {
  double center = 0.6;
  double width = 0.05;
  double cpt_scale = 0.3;
};

/// -sum_i (x_i - c_i)^2
struct Quadratic {
  std::vector<double> centers;
};

/// -|| merge(point) - target ||_2 over every tensor of the merged checkpoint.
struct HiddenTarget {
  const TensorMap* base = nullptr;
  const DistributionVector* it_vec = nullptr;
  std::span<const DistributionVector> vecs;
  const TensorMap* target = nullptr;
  MergeMethod method = MergeMethod::TaskArithmetic;
  MergeParams params;
};

double sharp_ridge_score(std::span<const double> point, const SharpRidge& obj = {});
double quadratic_score(std::span<const double> point, const Quadratic& obj);
double hidden_target_score(const WeightVector& point, const HiddenTarget& obj);
/// L2 distance over all tensors, accumulated in double.
double tensor_map_distance(const TensorMap& a, const TensorMap& b);

class SyntheticEvaluator final : public Evaluator {
 public:
  explicit SyntheticEvaluator(SharpRidge obj) : kind_(Kind::SharpRidge), ridge_(obj) {}
  explicit SyntheticEvaluator(Quadratic obj) : kind_(Kind::Quadratic), quadratic_(std::move(obj)) {}
  explicit SyntheticEvaluator(HiddenTarget obj) : kind_(Kind::HiddenTarget), hidden_(obj) {}

  EvalResult evaluate(const EvalRequest& request) override;

 private:
  enum class Kind { SharpRidge, Quadratic, HiddenTarget };
  Kind kind_;
  SharpRidge ridge_;
  Quadratic quadratic_;
  HiddenTarget hidden_;
};

}  // namespace optimerge
