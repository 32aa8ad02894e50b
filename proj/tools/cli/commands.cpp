#include "cli/commands.hpp"

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cli/config.hpp"
#include "optimerge/analysis.hpp"
#include "optimerge/digest.hpp"
#include "optimerge/distribution_vectors.hpp"
#include "optimerge/error.hpp"
#include "optimerge/merge_methods.hpp"
#include "optimerge/search.hpp"
#include "optimerge/study.hpp"
#include "optimerge/tensor_store.hpp"

namespace optimerge::cli {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::IoFailure:
    case Errc::SpawnFailure:
    case Errc::Timeout: return kExitRuntime;
    case Errc::BatchExhausted:
    case Errc::EvaluatorFailed: return kExitEvaluator;
    default: return kExitValidation;
  }
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto bytes = std::as_bytes(std::span(text.data(), text.size()));
  write_file_bytes(path, bytes);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// --- model inputs -------------------------------------------------------------------

struct ModelInputs {
  TensorMap base;
  fs::path base_path;
  std::string base_digest;
  std::optional<DistributionVector> it;
  std::optional<fs::path> it_path;
  std::vector<DistributionVector> vecs;
  std::vector<fs::path> vec_paths;
  std::vector<std::string> names;  // weight names, "it" first when present

  const DistributionVector* it_ptr() const { return it ? &*it : nullptr; }
};

void check_base_id(const DistributionVector& v, const fs::path& path, const std::string& digest) {
  if (!v.base_id.empty() && v.base_id != digest) {
    throw Error(Errc::BaseMismatch, "vector '" + path.string() + "' was extracted against base " + v.base_id +
                                        ", but the configured base has digest " + digest);
  }
}

std::unique_ptr<ModelInputs> load_inputs(const ModelConfig& m) {
  auto in = std::make_unique<ModelInputs>();
  in->base_path = m.base;
  in->base = read_container(m.base);
  in->base_digest = sha256_file(m.base);
  if (m.it_vector) {
    in->it = load_vector(*m.it_vector);
    in->it_path = *m.it_vector;
    check_base_id(*in->it, *m.it_vector, in->base_digest);
    in->names.emplace_back("it");
  }
  for (std::size_t i = 0; i < m.vectors.size(); ++i) {
    auto v = load_vector(m.vectors[i]);
    check_base_id(v, m.vectors[i], in->base_digest);
    std::string name = !m.names.empty() ? m.names[i] : !v.source_id.empty() ? v.source_id : m.vectors[i].stem().string();
    in->names.push_back(std::move(name));
    in->vecs.push_back(std::move(v));
    in->vec_paths.push_back(m.vectors[i]);
  }
  std::set<std::string> seen;
  for (const auto& n : in->names) {
    if (!seen.insert(n).second) {
      throw Error(Errc::InvalidArgument, "duplicate weight name '" + n + "'; set [model] names explicitly");
    }
  }
  return in;
}

json params_json(const MergeConfig& merge) {
  json p{{"drop_rate", merge.params.drop_rate},
         {"density", merge.params.density},
         {"seed", merge.params.seed},
         {"exempt_it", merge.params.exempt_it}};
  p["out_dtype"] = merge.params.out_dtype ? json(std::string(dtype_name(*merge.params.out_dtype))) : json(nullptr);
  return p;
}

json weights_json(const WeightVector& w) {
  json j = json::object();
  for (std::size_t i = 0; i < w.size(); ++i) j[w.names[i]] = w[i];
  return j;
}

// Writes the merged checkpoint for `weights` and a manifest next to it.
void write_merge(const ModelInputs& in, const MergeConfig& merge, const WeightVector& weights, const fs::path& out) {
  const auto merged = merge_recipe(merge.method, in.base, in.it_ptr(), in.vecs, weights, merge.params);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_container(merged, out);

  json inputs{{"base", {{"path", in.base_path.string()}, {"sha256", in.base_digest}}}};
  if (in.it_path) inputs["it_vector"] = {{"path", in.it_path->string()}, {"sha256", sha256_file(*in.it_path)}};
  inputs["vectors"] = json::array();
  for (const auto& p : in.vec_paths) inputs["vectors"].push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});

  json seeds{{"merge", merge.params.seed}};
  if (merge.method == MergeMethod::DareLinear || merge.method == MergeMethod::DareTies) {
    const SparsifierConfig sp{SparsifierConfig::Method::DareRandomDrop, merge.params.drop_rate, merge.params.seed};
    json slots = json::array();
    for (std::size_t s = 0; s < weights.size(); ++s) slots.push_back(sp.for_slot(s).seed);
    seeds["per_vector"] = slots;
  }
  json manifest{{"recipe", std::string(method_name(merge.method))},
                {"params", params_json(merge)},
                {"weights", weights_json(weights)},
                {"seeds", seeds},
                {"inputs", inputs},
                {"output", {{"path", out.string()}, {"sha256", sha256_file(out)}}},
                {"created", utc_timestamp()}};
  write_json(fs::path(out.string() + ".manifest.json"), manifest);
}

// --- evaluators ---------------------------------------------------------------------

// Builds each trial's checkpoint on disk and scores it with the external command.
class PipelineEvaluator final : public Evaluator {
 public:
  PipelineEvaluator(const ModelInputs& in, MergeConfig merge, ExternalCommand command, fs::path scratch, bool keep)
      : in_(in), merge_(std::move(merge)), command_(std::move(command)), scratch_(std::move(scratch)), keep_(keep) {}

  EvalResult evaluate(const EvalRequest& request) override {
    EvalRequest req = request;
    const bool own_dir = req.workdir.empty();
    if (own_dir) {
      char name[64];
      std::snprintf(name, sizeof name, "eval-%06zu", req.trial_index);
      req.workdir = scratch_ / name;
      fs::create_directories(req.workdir);
    }
    struct Cleanup {
      const fs::path& dir;
      bool active;
      ~Cleanup() {
        std::error_code ec;
        if (active) fs::remove_all(dir, ec);
      }
    } cleanup{req.workdir, own_dir && !keep_};

    const auto start = Clock::now();
    const auto merged = merge_recipe(merge_.method, in_.base, in_.it_ptr(), in_.vecs, req.point, merge_.params);
    const auto model = req.workdir / "model.safetensors";
    write_container(merged, model);
    const double merge_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    auto result = evaluate_external(req, model, command_);
    result.merge_ms = merge_ms;
    return result;
  }

 private:
  const ModelInputs& in_;
  MergeConfig merge_;
  ExternalCommand command_;
  fs::path scratch_;
  bool keep_;
};

struct EvaluatorBundle {
  std::unique_ptr<ModelInputs> inputs;
  std::unique_ptr<TensorMap> target;
  std::unique_ptr<Evaluator> evaluator;
};

EvaluatorBundle make_evaluator(const RunConfig& cfg, const fs::path& scratch) {
  EvaluatorBundle b;
  if (cfg.model) b.inputs = load_inputs(*cfg.model);
  const auto& e = cfg.evaluator;
  switch (e.kind) {
    case EvaluatorKind::External: {
      ExternalCommand cmd{e.command, std::chrono::milliseconds(static_cast<std::int64_t>(e.timeout_s * 1000.0))};
      b.evaluator = std::make_unique<PipelineEvaluator>(*b.inputs, cfg.merge, std::move(cmd), scratch, cfg.keep_trials);
      break;
    }
    case EvaluatorKind::SharpRidge: b.evaluator = std::make_unique<SyntheticEvaluator>(e.ridge); break;
    case EvaluatorKind::Quadratic: b.evaluator = std::make_unique<SyntheticEvaluator>(Quadratic{e.centers}); break;
    case EvaluatorKind::HiddenTarget: {
      b.target = std::make_unique<TensorMap>(read_container(*e.target));
      HiddenTarget h;
      h.base = &b.inputs->base;
      h.it_vec = b.inputs->it_ptr();
      h.vecs = b.inputs->vecs;
      h.target = b.target.get();
      h.method = cfg.merge.method;
      h.params = cfg.merge.params;
      b.evaluator = std::make_unique<SyntheticEvaluator>(h);
      break;
    }
  }
  return b;
}

fs::path scratch_root(const fs::path& out_dir) {
  if (const char* cache = std::getenv("OPTIMERGE_CACHE_DIR"); cache && *cache) {
    return fs::path(cache) / ("optimerge-" + std::to_string(::getpid()));
  }
  return out_dir / "trials";
}

void remove_if_empty(const fs::path& dir) {
  std::error_code ec;
  if (fs::is_directory(dir, ec) && fs::is_empty(dir, ec)) fs::remove(dir, ec);
}

// --- search space -------------------------------------------------------------------

struct RangeOverrides {
  std::vector<double> cpt;  // empty or {low, high}
  std::vector<double> it;
};

SearchSpace build_space(const RunConfig& cfg, const ModelInputs* inputs, const RangeOverrides& ov) {
  SearchSpace space;
  const auto& sc = cfg.search;
  if (!sc.dimensions.empty()) {
    space.dims = sc.dimensions;
    space.has_it = inputs ? inputs->it.has_value() : space.dims.front().name == "it";
    if (inputs) {
      if (space.dims.size() != inputs->names.size()) {
        throw Error(Errc::WeightCountMismatch, "[search] dimensions list " + std::to_string(space.dims.size()) +
                                                   " entries for " + std::to_string(inputs->names.size()) + " vectors");
      }
      for (std::size_t i = 0; i < space.dims.size(); ++i) {
        if (space.dims[i].name != inputs->names[i]) {
          throw Error(Errc::InvalidArgument, "dimension '" + space.dims[i].name + "' does not match vector '" +
                                                 inputs->names[i] + "'");
        }
      }
    }
  } else {
    if (!inputs) throw Error(Errc::EmptySpace, "no search dimensions configured");
    for (std::size_t i = 0; i < inputs->names.size(); ++i) {
      const bool is_it = inputs->it && i == 0;
      const auto [lo, hi] = is_it ? sc.it_range : sc.cpt_range;
      space.dims.push_back({inputs->names[i], lo, hi});
    }
    space.has_it = inputs->it.has_value();
  }
  for (std::size_t i = 0; i < space.dims.size(); ++i) {
    const bool is_it = space.has_it && i == 0;
    const auto& r = is_it ? ov.it : ov.cpt;
    if (!r.empty()) {
      space.dims[i].low = r[0];
      space.dims[i].high = r[1];
    }
  }
  space.validate();
  return space;
}

// --- config overrides from flags -------------------------------------------------------

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

nlohmann::json& section(nlohmann::json& doc, const char* name) {
  if (!doc.contains(name)) doc[name] = nlohmann::json::object();
  return doc[name];
}

void apply_seed(nlohmann::json& doc, std::uint64_t seed) {
  doc["seed"] = seed;
  if (doc.contains("sampler") && doc["sampler"].contains("seed")) doc["sampler"]["seed"] = seed;
  if (doc.contains("merge") && doc["merge"].contains("seed")) doc["merge"]["seed"] = seed;
}

fs::path config_dir(const std::string& path) {
  const fs::path p(path);
  return p.parent_path().empty() ? fs::path(".") : p.parent_path();
}

// --- commands -----------------------------------------------------------------------

struct ExtractArgs {
  std::string base, tuned, out, source_id;
  std::vector<std::string> excludes;
  bool exclude_none = false;
};

int cmd_extract(const ExtractArgs& a, std::ostream& out) {
  const auto base = read_container(a.base);
  const auto tuned = read_container(a.tuned);
  ExclusionRule rule = ExclusionRule::defaults();
  if (a.exclude_none) rule.patterns.clear();
  if (!a.excludes.empty()) rule.patterns = a.excludes;
  const auto source = a.source_id.empty() ? fs::path(a.tuned).stem().string() : a.source_id;
  const auto v = extract(tuned, base, rule, sha256_file(a.base), source);
  save_vector(v, a.out);
  out << "wrote " << a.out << ": " << v.delta.tensors.size() << " tensors, " << v.delta.parameter_count()
      << " parameters, " << v.excluded.size() << " excluded\n";
  return kExitOk;
}

struct MergeArgs {
  CommonFlags common;
  std::string method;
  std::vector<double> weights;
};

int cmd_merge(const MergeArgs& a, std::ostream& out) {
  auto doc = read_config_document(a.common.config);
  if (a.common.seed) apply_seed(doc, *a.common.seed);
  if (!a.method.empty()) section(doc, "merge")["method"] = a.method;
  if (!a.weights.empty()) section(doc, "merge")["weights"] = a.weights;
  const auto cfg = parse_config(doc, config_dir(a.common.config));
  if (!cfg.model) throw Error(Errc::InvalidArgument, "merge needs a [model] section");
  const auto inputs = load_inputs(*cfg.model);
  if (cfg.merge.weights.size() != inputs->names.size()) {
    throw Error(Errc::WeightCountMismatch, std::to_string(cfg.merge.weights.size()) + " weights given for " +
                                               std::to_string(inputs->names.size()) + " vectors");
  }
  const WeightVector weights(inputs->names, cfg.merge.weights);
  const fs::path target = a.common.out.empty() ? cfg.output_dir / "merged.safetensors" : fs::path(a.common.out);
  write_merge(*inputs, cfg.merge, weights, target);
  out << "wrote " << target.string() << " (" << method_name(cfg.merge.method) << ")\n";
  return kExitOk;
}

struct OptimizeArgs {
  CommonFlags common;
  bool resume = false;
  RangeOverrides ranges;
  std::optional<std::size_t> trials, batch, parallel, top_k, stop_after;
  bool keep_trials = false;
};

int cmd_optimize(const OptimizeArgs& a, std::ostream& out, std::ostream& err) {
  auto doc = read_config_document(a.common.config);
  if (a.common.seed) apply_seed(doc, *a.common.seed);
  if (a.trials) section(doc, "search")["trials"] = *a.trials;
  if (a.batch) section(doc, "search")["batch"] = *a.batch;
  if (a.parallel) section(doc, "search")["parallel"] = *a.parallel;
  if (a.top_k) section(doc, "search")["top_k"] = *a.top_k;
  if (a.keep_trials) doc["keep_trials"] = true;
  const auto cfg = parse_config(doc, config_dir(a.common.config));
  const fs::path out_dir = a.common.out.empty() ? cfg.output_dir : fs::path(a.common.out);
  fs::create_directories(out_dir);

  const auto scratch = scratch_root(out_dir);
  require_search_setup(cfg);
  auto bundle = make_evaluator(cfg, scratch);
  Study study{build_space(cfg, bundle.inputs.get(), a.ranges), cfg.sampler, cfg.search.batch, {}};

  const auto study_path = out_dir / "study.jsonl";
  std::optional<StudyLog> log;
  if (a.resume && fs::exists(study_path)) {
    auto previous = load_study(study_path);
    if (previous.space != study.space || previous.sampler != study.sampler ||
        previous.batch_size != study.batch_size) {
      throw Error(Errc::InvalidArgument, "study '" + study_path.string() + "' was created with a different configuration");
    }
    study = std::move(previous);
    log.emplace(StudyLog::append_to(study_path));
    err << "resuming from trial " << study.trials.size() << "\n";
  } else {
    log.emplace(StudyLog::create(study_path, study));
  }

  SearchOptions opts;
  opts.trials = cfg.search.trials;
  opts.top_k = cfg.search.top_k;
  opts.parallel = cfg.search.parallel;
  opts.proxy_budget = cfg.search.proxy_budget;
  opts.dev_budget = cfg.search.dev_budget;
  opts.keep_workdirs = cfg.keep_trials;
  opts.stop_after = a.stop_after;
  if (cfg.evaluator.kind == EvaluatorKind::External) opts.workdir_root = scratch;

  SearchReport report;
  try {
    report = run_search(study, *bundle.evaluator, opts, &*log);
  } catch (...) {
    remove_if_empty(scratch);
    throw;
  }
  remove_if_empty(scratch);
  if (!report.completed) {
    out << "stopped after " << study.trials.size() << " of " << opts.trials << " trials; continue with --resume\n";
    return kExitOk;
  }

  const auto& best_trial = study.trials[report.best_index];
  write_json(out_dir / "best_weights.json", {{"trial", report.best_index},
                                             {"batch", best_trial.batch_id},
                                             {"weights", weights_json(report.best)},
                                             {"proxy_score", report.best_proxy},
                                             {"dev_score", report.best_dev ? json(*report.best_dev) : json(nullptr)}});
  json ratios{{"weights", weights_json(report.best)}};
  if (study.space.has_it) ratios["it_weight"] = report.best[0];
  try {
    json r = json::object();
    for (const auto& [name, frac] : weights_to_ratios(report.best, study.space.has_it)) r[name] = frac;
    ratios["ratios"] = r;
  } catch (const Error& e) {
    if (e.code() != Errc::AllNonPositive) throw;
    ratios["ratios"] = nullptr;
    ratios["note"] = "no strictly positive mixture weight";
  }
  write_json(out_dir / "ratios.json", ratios);

  json top = json::array();
  for (auto idx : report.top_k) {
    const auto& t = study.trials[idx];
    top.push_back({{"trial", idx},
                   {"proxy_score", *t.score},
                   {"dev_score", t.dev_score ? json(*t.dev_score) : json(nullptr)},
                   {"weights", weights_json(study.space.make_point(t.point))}});
  }
  std::size_t failed = 0;
  for (const auto& t : study.trials) failed += t.state == TrialState::Failed;
  write_json(out_dir / "report.json", {{"trials", study.trials.size()},
                                       {"failed", failed},
                                       {"batch_size", study.batch_size},
                                       {"best_trial", report.best_index},
                                       {"top_k", top}});

  if (bundle.inputs) write_merge(*bundle.inputs, cfg.merge, report.best, out_dir / "merged.safetensors");

  out << "best trial " << report.best_index << ":";
  for (std::size_t i = 0; i < report.best.size(); ++i) out << " " << report.best.names[i] << "=" << report.best[i];
  out << " proxy=" << report.best_proxy;
  if (report.best_dev) out << " dev=" << *report.best_dev;
  out << "\n";
  return kExitOk;
}

struct GridArgs {
  CommonFlags common;
  std::optional<std::size_t> points;
  bool force = false;
  RangeOverrides ranges;
};

int cmd_grid(const GridArgs& a, std::ostream& out) {
  auto doc = read_config_document(a.common.config);
  if (a.common.seed) apply_seed(doc, *a.common.seed);
  if (a.points) section(doc, "search")["grid_points"] = *a.points;
  const auto cfg = parse_config(doc, config_dir(a.common.config));
  const fs::path out_dir = a.common.out.empty() ? cfg.output_dir : fs::path(a.common.out);
  fs::create_directories(out_dir);
  const auto scratch = scratch_root(out_dir);
  require_search_setup(cfg);
  auto bundle = make_evaluator(cfg, scratch);
  const auto space = build_space(cfg, bundle.inputs.get(), a.ranges);
  const std::size_t cap = a.force ? std::numeric_limits<std::size_t>::max() : cfg.search.grid_cap;

  GridResult g;
  try {
    g = grid_search(space, *bundle.evaluator, cfg.search.grid_points, cap, cfg.search.proxy_budget);
  } catch (...) {
    remove_if_empty(scratch);
    throw;
  }
  remove_if_empty(scratch);

  std::ostringstream csv;
  csv << "index";
  for (const auto& d : space.dims) csv << "," << d.name;
  csv << ",score\n";
  for (const auto& t : g.trials) {
    csv << t.index;
    for (double x : t.point) csv << "," << num(x);
    csv << "," << (t.score ? num(*t.score) : std::string()) << "\n";
  }
  write_text(out_dir / "grid.csv", csv.str());
  write_json(out_dir / "grid_best.json",
             {{"weights", weights_json(g.best)}, {"score", g.best_score}, {"evaluations", g.trials.size()}});
  out << "grid of " << g.trials.size() << " points, best score " << g.best_score << "\n";
  return kExitOk;
}

struct AnalyzeArgs {
  std::string kind;
  std::vector<std::string> vectors;
  std::vector<std::string> labels;
  std::string out;
  std::string projection;
  std::size_t svd_rank = 0;
};

void emit(const AnalyzeArgs& a, const std::string& csv, const json& j, std::ostream& out) {
  if (a.out.empty()) {
    out << csv;
    return;
  }
  write_text(a.out + ".csv", csv);
  write_json(a.out + ".json", j);
}

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  std::vector<DistributionVector> vecs;
  for (const auto& p : a.vectors) vecs.push_back(load_vector(p));
  std::vector<std::string> labels = a.labels;
  if (labels.empty()) {
    for (std::size_t i = 0; i < vecs.size(); ++i) {
      labels.push_back(!vecs[i].source_id.empty() ? vecs[i].source_id : fs::path(a.vectors[i]).stem().string());
    }
  }
  if (labels.size() != vecs.size()) throw Error(Errc::InvalidArgument, "label count does not match vector count");

  std::ostringstream csv;
  if (a.kind == "cosine") {
    if (vecs.size() < 2) throw Error(Errc::InvalidArgument, "cosine needs at least two vectors");
    const auto m = pairwise_matrix(vecs, labels);
    csv << "label";
    for (const auto& l : m.labels) csv << "," << l;
    csv << "\n";
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      csv << m.labels[i];
      for (double v : m.values[i]) csv << "," << num(v);
      csv << "\n";
    }
    emit(a, csv.str(), {{"labels", m.labels}, {"matrix", m.values}}, out);
  } else if (a.kind == "layerwise") {
    if (vecs.size() != 2) throw Error(Errc::InvalidArgument, "layerwise needs exactly two vectors");
    json j = json::object();
    csv << "tensor,cosine\n";
    for (const auto& [name, c] : layerwise_cosine(vecs[0], vecs[1])) {
      csv << name << "," << (c ? num(*c) : std::string()) << "\n";
      j[name] = c ? json(*c) : json(nullptr);
    }
    emit(a, csv.str(), {{"labels", labels}, {"cosine", j}}, out);
  } else if (a.kind == "norms") {
    json j = json::object();
    csv << "label,l2_norm\n";
    for (const auto& [label, n] : norms(vecs, labels)) {
      csv << label << "," << num(n) << "\n";
      j[label] = n;
    }
    emit(a, csv.str(), j, out);
  } else if (a.kind == "pca") {
    if (a.svd_rank) {
      for (auto& v : vecs) v = svd_sparsify(v, {a.svd_rank});
    }
    auto proj = fit_pca(vecs, labels);
    proj.svd_rank = a.svd_rank;
    csv << "label,pc1,pc2\n";
    for (std::size_t i = 0; i < proj.labels.size(); ++i) {
      csv << proj.labels[i] << "," << num(proj.fit_coords[i][0]) << "," << num(proj.fit_coords[i][1]) << "\n";
    }
    if (!a.projection.empty()) write_container(projection_to_container(proj), a.projection);
    emit(a, csv.str(),
         {{"labels", proj.labels},
          {"coords", proj.fit_coords},
          {"explained_variance", proj.explained_variance},
          {"svd_rank", proj.svd_rank}},
         out);
  } else if (a.kind == "project") {
    if (a.projection.empty()) throw Error(Errc::InvalidArgument, "project needs --projection");
    const auto proj = projection_from_container(read_container(a.projection));
    json coords = json::array();
    csv << "label,pc1,pc2\n";
    for (std::size_t i = 0; i < vecs.size(); ++i) {
      const auto v = proj.svd_rank ? svd_sparsify(vecs[i], {proj.svd_rank}) : vecs[i];
      const auto xy = project(proj, v);
      csv << labels[i] << "," << num(xy[0]) << "," << num(xy[1]) << "\n";
      coords.push_back(xy);
    }
    emit(a, csv.str(), {{"labels", labels}, {"coords", coords}}, out);
  }
  return kExitOk;
}

struct ReportArgs {
  std::string study;
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const auto study = load_study(a.study);
  const fs::path out_dir = a.out.empty() ? fs::path(a.study).parent_path() : fs::path(a.out);
  const auto running = best_so_far(study);

  std::ostringstream csv;
  csv << "trial,batch";
  for (const auto& d : study.space.dims) csv << "," << d.name;
  csv << ",proxy,dev,best_so_far\n";
  std::optional<std::size_t> best_dev, best_proxy;
  std::size_t failed = 0;
  for (const auto& t : study.trials) {
    csv << t.index << "," << t.batch_id;
    for (double x : t.point) csv << "," << num(x);
    csv << "," << (t.score ? num(*t.score) : std::string()) << "," << (t.dev_score ? num(*t.dev_score) : std::string())
        << "," << (running[t.index] ? num(*running[t.index]) : std::string()) << "\n";
    failed += t.state == TrialState::Failed;
    if (t.dev_score && (!best_dev || *t.dev_score > *study.trials[*best_dev].dev_score)) best_dev = t.index;
    if (t.score && (!best_proxy || *t.score > *study.trials[*best_proxy].score)) best_proxy = t.index;
  }
  write_text(out_dir / "trials.csv", csv.str());

  json summary{{"trials", study.trials.size()}, {"failed", failed}};
  const auto best = best_dev ? best_dev : best_proxy;
  if (best) {
    const auto& t = study.trials[*best];
    summary["best"] = {{"trial", t.index},
                       {"selected_by", best_dev ? "dev" : "proxy"},
                       {"weights", weights_json(study.space.make_point(t.point))},
                       {"proxy_score", *t.score},
                       {"dev_score", t.dev_score ? json(*t.dev_score) : json(nullptr)}};
  } else {
    summary["best"] = nullptr;
  }
  double merge_ms = 0.0, eval_ms = 0.0;
  const auto timings = load_timings(a.study);
  for (const auto& t : timings) {
    merge_ms += t.merge_ms;
    eval_ms += t.eval_ms;
  }
  const double total = merge_ms + eval_ms;
  summary["time"] = {{"merge_ms", merge_ms},
                     {"evaluate_ms", eval_ms},
                     {"merge_fraction", total > 0 ? json(merge_ms / total) : json(nullptr)},
                     {"evaluate_fraction", total > 0 ? json(eval_ms / total) : json(nullptr)},
                     {"recorded_evaluations", timings.size()}};
  write_json(out_dir / "summary.json", summary);
  out << "wrote " << (out_dir / "trials.csv").string() << " and summary.json (" << study.trials.size() << " trials)\n";
  return kExitOk;
}

void add_range(CLI::App* cmd, const std::string& flag, std::vector<double>& target, const std::string& help) {
  cmd->add_option(flag, target, help)->expected(2);
}

void check_range(const std::vector<double>& r, const char* flag) {
  if (!r.empty() && !(r.size() == 2 && r[0] < r[1])) {
    throw Error(Errc::InvalidArgument, std::string(flag) + " needs LOW HIGH with LOW < HIGH");
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Merge-weight optimization for continually pre-trained checkpoints", "optimerge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "optimerge 0.1.0");
  std::function<int()> action;

  ExtractArgs ex;
  auto* c_extract = app.add_subcommand("extract", "Compute a distribution vector (tuned minus base)");
  c_extract->add_option("--base", ex.base, "Base checkpoint")->required();
  c_extract->add_option("--tuned", ex.tuned, "Continually pre-trained or instruction-tuned checkpoint")->required();
  c_extract->add_option("--exclude", ex.excludes, "Name substring to exclude (repeatable; replaces the defaults)")
      ->take_all();
  c_extract->add_flag("--no-exclude", ex.exclude_none, "Keep every tensor");
  c_extract->add_option("--source-id", ex.source_id, "Label stored in the vector (default: tuned file stem)");
  c_extract->add_option("--out", ex.out, "Output vector container")->required();
  c_extract->callback([&] { action = [&] { return cmd_extract(ex, out); }; });

  MergeArgs mg;
  auto* c_merge = app.add_subcommand("merge", "Build a merged checkpoint from a config");
  c_merge->add_option("--config", mg.common.config, "TOML or JSON config")->required();
  c_merge->add_option("--method", mg.method, "task_arithmetic | ties | dare_linear | dare_ties");
  c_merge->add_option("--weights", mg.weights, "Comma-separated weights, IT first when configured")->delimiter(',');
  c_merge->add_option("--seed", mg.common.seed, "Seed");
  c_merge->add_option("--out", mg.common.out, "Output container path");
  c_merge->callback([&] { action = [&] { return cmd_merge(mg, out); }; });

  OptimizeArgs op;
  auto* c_opt = app.add_subcommand("optimize", "Search merge weights with TPE");
  c_opt->add_option("--config", op.common.config, "TOML or JSON config")->required();
  c_opt->add_flag("--resume", op.resume, "Continue the study in the output directory");
  add_range(c_opt, "--range", op.ranges.cpt, "Bounds for every CPT weight: LOW HIGH");
  add_range(c_opt, "--it-range", op.ranges.it, "Bounds for the IT weight: LOW HIGH");
  c_opt->add_option("--trials", op.trials, "Trial budget T");
  c_opt->add_option("--batch", op.batch, "Suggestions per batch B");
  c_opt->add_option("--parallel", op.parallel, "Concurrent evaluations");
  c_opt->add_option("--top-k", op.top_k, "Trials re-evaluated in dev mode");
  c_opt->add_option("--stop-after", op.stop_after, "Stop after this many trials (resumable)");
  c_opt->add_option("--seed", op.common.seed, "Seed");
  c_opt->add_option("--out", op.common.out, "Output directory");
  c_opt->add_flag("--keep-trials", op.keep_trials, "Keep per-trial checkpoints");
  c_opt->callback([&] {
    action = [&] {
      check_range(op.ranges.cpt, "--range");
      check_range(op.ranges.it, "--it-range");
      return cmd_optimize(op, out, err);
    };
  });

  GridArgs gr;
  auto* c_grid = app.add_subcommand("grid", "Exhaustive grid search baseline");
  c_grid->add_option("--config", gr.common.config, "TOML or JSON config")->required();
  c_grid->add_option("--points", gr.points, "Grid points per dimension G");
  c_grid->add_flag("--force", gr.force, "Ignore the evaluation cap");
  add_range(c_grid, "--range", gr.ranges.cpt, "Bounds for every CPT weight: LOW HIGH");
  add_range(c_grid, "--it-range", gr.ranges.it, "Bounds for the IT weight: LOW HIGH");
  c_grid->add_option("--out", gr.common.out, "Output directory");
  c_grid->callback([&] {
    action = [&] {
      check_range(gr.ranges.cpt, "--range");
      check_range(gr.ranges.it, "--it-range");
      return cmd_grid(gr, out);
    };
  });

  AnalyzeArgs an;
  auto* c_an = app.add_subcommand("analyze", "Similarity, norms and PCA of distribution vectors");
  c_an->add_option("kind", an.kind, "cosine | layerwise | norms | pca | project")
      ->required()
      ->check(CLI::IsMember({"cosine", "layerwise", "norms", "pca", "project"}));
  c_an->add_option("vectors", an.vectors, "Vector containers")->required()->check(CLI::ExistingFile);
  c_an->add_option("--labels", an.labels, "Comma-separated labels")->delimiter(',');
  c_an->add_option("--out", an.out, "Output prefix for .csv and .json (default: CSV on stdout)");
  c_an->add_option("--projection", an.projection, "Projection container (written by pca, read by project)");
  c_an->add_option("--svd-rank", an.svd_rank, "Low-rank approximation of 2-D tensors before PCA");
  c_an->callback([&] { action = [&] { return cmd_analyze(an, out); }; });

  ReportArgs rp;
  auto* c_rep = app.add_subcommand("report", "Trial table and timing summary of a study");
  c_rep->add_option("--study", rp.study, "Study JSONL")->required()->check(CLI::ExistingFile);
  c_rep->add_option("--out", rp.out, "Output directory (default: next to the study)");
  c_rep->callback([&] { action = [&] { return cmd_report(rp, out); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }
  if (!action) return kExitValidation;
  try {
    return action();
  } catch (const Error& e) {
    err << "optimerge: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "optimerge: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace optimerge::cli
