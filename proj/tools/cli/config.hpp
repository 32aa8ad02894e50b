#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "optimerge/evaluator.hpp"
#include "optimerge/merge_methods.hpp"
#include "optimerge/study.hpp"

namespace optimerge::cli {

struct ModelConfig {
  std::filesystem::path base;
  std::optional<std::filesystem::path> it_vector;
  std::vector<std::filesystem::path> vectors;
  std::vector<std::string> names;  // defaults to each vector's source id
};

struct MergeConfig {
  MergeMethod method = MergeMethod::DareLinear;
  MergeParams params;
  std::vector<double> weights;  // used by `merge`
};

struct SearchConfig {
  std::pair<double, double> it_range{0.3, 1.0};
  std::pair<double, double> cpt_range{0.0, 1.0};
  std::vector<Dimension> dimensions;  // explicit space; overrides the ranges
  std::size_t trials = 100;
  std::size_t batch = 1;
  std::size_t top_k = 3;
  std::size_t parallel = 1;
  std::size_t proxy_budget = kDefaultProxyBudget;
  std::size_t dev_budget = kDefaultDevBudget;
  std::size_t grid_points = 3;
  std::size_t grid_cap = 100'000;
};

enum class EvaluatorKind { External, SharpRidge, Quadratic, HiddenTarget };

struct EvaluatorConfig {
  EvaluatorKind kind = EvaluatorKind::External;
  std::string command;
  double timeout_s = 3600.0;
  std::optional<std::filesystem::path> target;  // hidden_target
  std::vector<double> centers;                 // quadratic
  SharpRidge ridge;
};

/// One declarative pipeline invocation. Relative paths are resolved against
/// the directory holding the config file.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "optimerge-out";
  bool keep_trials = false;
  std::optional<ModelConfig> model;
  MergeConfig merge;
  SearchConfig search;
  TPEConfig sampler;
  EvaluatorConfig evaluator;
};

/// Reads a TOML file, or JSON when the extension is .json, into the common
/// JSON form.
nlohmann::json read_config_document(const std::filesystem::path& path);

/// Strict conversion: unknown keys, wrong types, out-of-range values and
/// missing input files raise Error(InvalidArgument).
RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

/// Checks what `optimize` and `grid` need beyond parsing: an evaluator that can
/// run and a non-empty search space.
void require_search_setup(const RunConfig& cfg);

EvaluatorKind parse_evaluator_kind(std::string_view name);

}  // namespace optimerge::cli
