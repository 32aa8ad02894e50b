#include "cli/config.hpp"

#include <cmath>
#include <set>

#include <toml.hpp>

#include "optimerge/error.hpp"

namespace optimerge::cli {

namespace {

using json = nlohmann::json;

[[noreturn]] void invalid(const std::string& msg) { throw Error(Errc::InvalidArgument, "config: " + msg); }

json toml_to_json(const toml::node& node) {
  if (auto* t = node.as_table()) {
    json obj = json::object();
    for (const auto& [k, v] : *t) obj[std::string(k.str())] = toml_to_json(v);
    return obj;
  }
  if (auto* a = node.as_array()) {
    json arr = json::array();
    for (const auto& v : *a) arr.push_back(toml_to_json(v));
    return arr;
  }
  if (auto* s = node.as_string()) return s->get();
  if (auto* i = node.as_integer()) return i->get();
  if (auto* f = node.as_floating_point()) return f->get();
  if (auto* b = node.as_boolean()) return b->get();
  invalid("unsupported TOML value type (dates and times are not accepted)");
}

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!obj.is_object()) invalid("'" + where + "' must be a table");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == key;
    if (!ok) invalid("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get(const json& obj, std::string_view key, const std::string& where) {
  try {
    return obj.at(std::string(key)).get<T>();
  } catch (const json::exception&) {
    invalid("'" + std::string(key) + "' in " + where + " has the wrong type");
  }
}

std::size_t get_count(const json& obj, std::string_view key, const std::string& where, std::size_t minimum = 1) {
  const auto& v = obj.at(std::string(key));
  if (!v.is_number_integer() || v.get<std::int64_t>() < static_cast<std::int64_t>(minimum)) {
    invalid("'" + std::string(key) + "' in " + where + " must be an integer >= " + std::to_string(minimum));
  }
  return v.get<std::size_t>();
}

double get_number(const json& obj, std::string_view key, const std::string& where) {
  const auto& v = obj.at(std::string(key));
  if (!v.is_number() || !std::isfinite(v.get<double>())) {
    invalid("'" + std::string(key) + "' in " + where + " must be a finite number");
  }
  return v.get<double>();
}

std::pair<double, double> get_range(const json& obj, std::string_view key, const std::string& where) {
  const auto& v = obj.at(std::string(key));
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    invalid("'" + std::string(key) + "' in " + where + " must be [low, high]");
  }
  const auto lo = v[0].get<double>();
  const auto hi = v[1].get<double>();
  if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi)) invalid("'" + std::string(key) + "' needs low < high");
  return {lo, hi};
}

std::filesystem::path existing_path(const json& v, const std::filesystem::path& base_dir, const std::string& what) {
  if (!v.is_string()) invalid(what + " must be a path string");
  std::filesystem::path p = v.get<std::string>();
  if (p.is_relative()) p = base_dir / p;
  if (!std::filesystem::exists(p)) invalid(what + " '" + p.string() + "' does not exist");
  return p;
}

std::vector<double> get_numbers(const json& obj, std::string_view key, const std::string& where) {
  const auto& v = obj.at(std::string(key));
  if (!v.is_array()) invalid("'" + std::string(key) + "' in " + where + " must be an array of numbers");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number() || !std::isfinite(x.get<double>())) invalid("'" + std::string(key) + "' holds a non-number");
    out.push_back(x.get<double>());
  }
  return out;
}

std::uint64_t get_seed(const json& obj, std::string_view key, const std::string& where) {
  const auto& v = obj.at(std::string(key));
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    invalid("'" + std::string(key) + "' in " + where + " must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

}  // namespace

EvaluatorKind parse_evaluator_kind(std::string_view name) {
  if (name == "external") return EvaluatorKind::External;
  if (name == "sharp_ridge") return EvaluatorKind::SharpRidge;
  if (name == "quadratic") return EvaluatorKind::Quadratic;
  if (name == "hidden_target") return EvaluatorKind::HiddenTarget;
  invalid("unknown evaluator kind '" + std::string(name) + "'");
}

json read_config_document(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(Errc::IoFailure, "config file '" + path.string() + "' not found");
  if (path.extension() == ".json") {
    std::ifstream in(path);
    try {
      return json::parse(in);
    } catch (const json::exception& e) {
      invalid(std::string("invalid JSON: ") + e.what());
    }
  }
  try {
    const auto table = toml::parse_file(path.string());
    return toml_to_json(table);
  } catch (const toml::parse_error& e) {
    invalid(std::string("invalid TOML: ") + std::string(e.description()));
  }
}

RunConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
  check_keys(doc, {"seed", "output_dir", "keep_trials", "model", "merge", "search", "sampler", "evaluator"}, "top level");
  RunConfig cfg;
  if (doc.contains("seed")) cfg.seed = get_seed(doc, "seed", "top level");
  if (doc.contains("output_dir")) {
    cfg.output_dir = get<std::string>(doc, "output_dir", "top level");
    if (cfg.output_dir.is_relative()) cfg.output_dir = base_dir / cfg.output_dir;
  } else {
    cfg.output_dir = base_dir / cfg.output_dir;
  }
  if (doc.contains("keep_trials")) cfg.keep_trials = get<bool>(doc, "keep_trials", "top level");
  cfg.sampler.seed = cfg.seed;
  cfg.merge.params.seed = cfg.seed;

  if (doc.contains("model")) {
    const auto& m = doc["model"];
    check_keys(m, {"base", "it_vector", "vectors", "names"}, "[model]");
    ModelConfig mc;
    if (!m.contains("base")) invalid("[model] needs 'base'");
    mc.base = existing_path(m["base"], base_dir, "base checkpoint");
    if (m.contains("it_vector")) mc.it_vector = existing_path(m["it_vector"], base_dir, "IT vector");
    if (m.contains("vectors")) {
      if (!m["vectors"].is_array()) invalid("[model] vectors must be an array");
      for (const auto& v : m["vectors"]) mc.vectors.push_back(existing_path(v, base_dir, "vector"));
    }
    if (m.contains("names")) {
      mc.names = get<std::vector<std::string>>(m, "names", "[model]");
      if (mc.names.size() != mc.vectors.size()) invalid("[model] names must match vectors one to one");
    }
    if (!mc.it_vector && mc.vectors.empty()) invalid("[model] lists no vectors");
    cfg.model = std::move(mc);
  }

  if (doc.contains("merge")) {
    const auto& m = doc["merge"];
    check_keys(m, {"method", "drop_rate", "density", "seed", "exempt_it", "out_dtype", "weights"}, "[merge]");
    if (m.contains("method")) cfg.merge.method = parse_method(get<std::string>(m, "method", "[merge]"));
    if (m.contains("drop_rate")) cfg.merge.params.drop_rate = get_number(m, "drop_rate", "[merge]");
    if (m.contains("density")) cfg.merge.params.density = get_number(m, "density", "[merge]");
    if (m.contains("seed")) cfg.merge.params.seed = get_seed(m, "seed", "[merge]");
    if (m.contains("exempt_it")) cfg.merge.params.exempt_it = get<bool>(m, "exempt_it", "[merge]");
    if (m.contains("out_dtype")) {
      try {
        cfg.merge.params.out_dtype = parse_dtype(get<std::string>(m, "out_dtype", "[merge]"));
      } catch (const Error&) {
        invalid("[merge] out_dtype must be F32, F16 or BF16");
      }
    }
    if (m.contains("weights")) cfg.merge.weights = get_numbers(m, "weights", "[merge]");
    SparsifierConfig{SparsifierConfig::Method::DareRandomDrop, cfg.merge.params.drop_rate, 0}.validate();
    if (!(cfg.merge.params.density > 0.0 && cfg.merge.params.density <= 1.0)) invalid("[merge] density must lie in (0, 1]");
  }

  if (doc.contains("search")) {
    const auto& s = doc["search"];
    const std::string where = "[search]";
    check_keys(s,
               {"it_range", "cpt_range", "dimensions", "trials", "batch", "top_k", "parallel", "proxy_budget",
                "dev_budget", "grid_points", "grid_cap"},
               where);
    auto& sc = cfg.search;
    if (s.contains("it_range")) sc.it_range = get_range(s, "it_range", where);
    if (s.contains("cpt_range")) sc.cpt_range = get_range(s, "cpt_range", where);
    if (s.contains("dimensions")) {
      if (!s["dimensions"].is_array()) invalid("[search] dimensions must be an array of tables");
      for (const auto& d : s["dimensions"]) {
        check_keys(d, {"name", "low", "high"}, "[search] dimension");
        Dimension dim{get<std::string>(d, "name", "dimension"), get_number(d, "low", "dimension"),
                      get_number(d, "high", "dimension")};
        sc.dimensions.push_back(std::move(dim));
      }
    }
    if (s.contains("trials")) sc.trials = get_count(s, "trials", where);
    if (s.contains("batch")) sc.batch = get_count(s, "batch", where);
    if (s.contains("top_k")) sc.top_k = get_count(s, "top_k", where);
    if (s.contains("parallel")) sc.parallel = get_count(s, "parallel", where);
    if (s.contains("proxy_budget")) sc.proxy_budget = get_count(s, "proxy_budget", where);
    if (s.contains("dev_budget")) sc.dev_budget = get_count(s, "dev_budget", where);
    if (s.contains("grid_points")) sc.grid_points = get_count(s, "grid_points", where, 2);
    if (s.contains("grid_cap")) sc.grid_cap = get_count(s, "grid_cap", where);
    if (sc.proxy_budget > sc.dev_budget) invalid("[search] proxy_budget may not exceed dev_budget");
    if (sc.top_k > sc.trials) invalid("[search] top_k may not exceed trials");
  }

  if (doc.contains("sampler")) {
    const auto& s = doc["sampler"];
    check_keys(s, {"gamma", "n_startup", "candidates", "bandwidth", "seed"}, "[sampler]");
    if (s.contains("gamma")) cfg.sampler.gamma = get_number(s, "gamma", "[sampler]");
    if (s.contains("n_startup")) cfg.sampler.n_startup = get_count(s, "n_startup", "[sampler]");
    if (s.contains("candidates")) cfg.sampler.candidates = get_count(s, "candidates", "[sampler]");
    if (s.contains("bandwidth")) {
      const auto& bw = s["bandwidth"];
      if (bw.is_string() && bw.get<std::string>() == "scott") {
        cfg.sampler.fixed_bandwidth.reset();
      } else if (bw.is_number()) {
        cfg.sampler.fixed_bandwidth = bw.get<double>();
      } else {
        invalid("[sampler] bandwidth must be \"scott\" or a number");
      }
    }
    if (s.contains("seed")) cfg.sampler.seed = get_seed(s, "seed", "[sampler]");
    cfg.sampler.validate();
  }
  if (cfg.search.trials < cfg.sampler.n_startup) invalid("[search] trials must be >= [sampler] n_startup");

  if (doc.contains("evaluator")) {
    const auto& e = doc["evaluator"];
    check_keys(e, {"kind", "command", "timeout_s", "target", "centers", "center", "width", "cpt_scale"}, "[evaluator]");
    auto& ec = cfg.evaluator;
    if (e.contains("kind")) ec.kind = parse_evaluator_kind(get<std::string>(e, "kind", "[evaluator]"));
    if (e.contains("command")) ec.command = get<std::string>(e, "command", "[evaluator]");
    if (e.contains("timeout_s")) {
      ec.timeout_s = get_number(e, "timeout_s", "[evaluator]");
      if (ec.timeout_s <= 0) invalid("[evaluator] timeout_s must be positive");
    }
    if (e.contains("target")) ec.target = existing_path(e["target"], base_dir, "target checkpoint");
    if (e.contains("centers")) ec.centers = get_numbers(e, "centers", "[evaluator]");
    if (e.contains("center")) ec.ridge.center = get_number(e, "center", "[evaluator]");
    if (e.contains("width")) ec.ridge.width = get_number(e, "width", "[evaluator]");
    if (e.contains("cpt_scale")) ec.ridge.cpt_scale = get_number(e, "cpt_scale", "[evaluator]");
    if (ec.ridge.width <= 0 || ec.ridge.cpt_scale <= 0) invalid("[evaluator] width and cpt_scale must be positive");
  }
  return cfg;
}

void require_search_setup(const RunConfig& cfg) {
  switch (cfg.evaluator.kind) {
    case EvaluatorKind::External:
      if (cfg.evaluator.command.empty()) invalid("external evaluator needs 'command'");
      if (!cfg.model) invalid("external evaluator needs a [model] section to build checkpoints");
      break;
    case EvaluatorKind::HiddenTarget:
      if (!cfg.evaluator.target) invalid("hidden_target evaluator needs 'target'");
      if (!cfg.model) invalid("hidden_target evaluator needs a [model] section");
      break;
    case EvaluatorKind::Quadratic:
    case EvaluatorKind::SharpRidge: break;
  }
  if (!cfg.model && cfg.search.dimensions.empty()) invalid("without [model], [search] dimensions are required");
}

RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_config_document(path), path.parent_path().empty() ? "." : path.parent_path());
}

}  // namespace optimerge::cli
