#include "optimerge/study.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "optimerge/error.hpp"
#include "optimerge/tensor_store.hpp"

namespace optimerge {

namespace {

using json = nlohmann::ordered_json;

constexpr std::string_view kFormat = "optimerge-study";
constexpr int kVersion = 1;

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

TrialState parse_state(const std::string& s) {
  if (s == "scored") return TrialState::Scored;
  if (s == "failed") return TrialState::Failed;
  if (s == "pending") return TrialState::Pending;
  throw Error(Errc::MalformedHeader, "unknown trial state '" + s + "'");
}

// Drops a final line that was not terminated by a newline.
void truncate_torn_tail(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return;
  const auto bytes = read_file_bytes(path);
  std::size_t keep = bytes.size();
  while (keep > 0 && bytes[keep - 1] != std::byte{'\n'}) --keep;
  if (keep != bytes.size()) std::filesystem::resize_file(path, keep);
}

}  // namespace

void SearchSpace::validate() const {
  if (dims.empty()) throw Error(Errc::EmptySpace, "search space has no dimensions");
  std::set<std::string> seen;
  for (const auto& d : dims) {
    if (d.name.empty()) throw Error(Errc::InvalidArgument, "dimension name must be non-empty");
    if (!seen.insert(d.name).second) throw Error(Errc::InvalidArgument, "duplicate dimension '" + d.name + "'");
    if (!std::isfinite(d.low) || !std::isfinite(d.high) || !(d.low < d.high)) {
      throw Error(Errc::InvalidArgument, "dimension '" + d.name + "' needs finite low < high");
    }
  }
}

bool SearchSpace::contains(const std::vector<double>& point) const {
  if (point.size() != dims.size()) return false;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (!(point[i] >= dims[i].low && point[i] <= dims[i].high)) return false;
  }
  return true;
}

std::vector<std::string> SearchSpace::names() const {
  std::vector<std::string> out;
  out.reserve(dims.size());
  for (const auto& d : dims) out.push_back(d.name);
  return out;
}

WeightVector SearchSpace::make_point(std::vector<double> values) const { return {names(), std::move(values)}; }

void TPEConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw Error(Errc::InvalidArgument, "gamma must lie in (0, 1)");
  if (n_startup == 0) throw Error(Errc::InvalidArgument, "startup trial count must be positive");
  if (candidates == 0) throw Error(Errc::InvalidArgument, "candidate count must be positive");
  if (fixed_bandwidth && !(*fixed_bandwidth > 0.0 && std::isfinite(*fixed_bandwidth))) {
    throw Error(Errc::InvalidArgument, "fixed bandwidth must be positive");
  }
}

std::size_t Study::scored_count() const {
  std::size_t n = 0;
  for (const auto& t : trials) n += t.state == TrialState::Scored ? 1 : 0;
  return n;
}

std::size_t Study::next_batch_id() const { return trials.empty() ? 0 : trials.back().batch_id + 1; }

void record(Study& study, Trial trial) {
  if (trial.index != study.trials.size()) {
    throw Error(Errc::IndexGap, "expected trial index " + std::to_string(study.trials.size()) + ", got " +
                                    std::to_string(trial.index));
  }
  if (trial.state == TrialState::Scored && !(trial.score && std::isfinite(*trial.score))) {
    throw Error(Errc::NonFiniteScore, "trial " + std::to_string(trial.index) + " has no finite score");
  }
  if (trial.point.size() != study.space.dims.size()) {
    throw Error(Errc::InvalidArgument, "trial point has the wrong dimensionality");
  }
  study.trials.push_back(std::move(trial));
}

std::string_view to_string(TrialState s) noexcept {
  switch (s) {
    case TrialState::Pending: return "pending";
    case TrialState::Scored: return "scored";
    case TrialState::Failed: return "failed";
  }
  return "pending";
}

std::string study_header_line(const Study& study) {
  json space = json::array();
  for (const auto& d : study.space.dims) space.push_back({{"name", d.name}, {"low", d.low}, {"high", d.high}});
  json sampler = {{"gamma", study.sampler.gamma},
                  {"n_startup", study.sampler.n_startup},
                  {"candidates", study.sampler.candidates},
                  {"bandwidth", study.sampler.fixed_bandwidth ? json(*study.sampler.fixed_bandwidth) : json("scott")},
                  {"seed", study.sampler.seed}};
  json header = {{"format", kFormat},        {"version", kVersion},
                 {"space", std::move(space)}, {"has_it", study.space.has_it},
                 {"sampler", std::move(sampler)}, {"batch_size", study.batch_size}};
  return header.dump();
}

std::string trial_line(const Trial& trial) {
  json line = {{"kind", "trial"},
               {"index", trial.index},
               {"batch", trial.batch_id},
               {"point", trial.point},
               {"proxy_score", optional_number(trial.score)},
               {"state", to_string(trial.state)}};
  if (!trial.error.empty()) line["error"] = trial.error;
  return line.dump();
}

std::string dev_line(std::size_t index, std::optional<double> dev_score, const std::string& error) {
  json line = {{"kind", "dev"}, {"index", index}, {"dev_score", optional_number(dev_score)}};
  if (!error.empty()) line["error"] = error;
  return line.dump();
}

std::string serialize_study(const Study& study) {
  std::string out = study_header_line(study) + "\n";
  for (const auto& t : study.trials) out += trial_line(t) + "\n";
  for (const auto& t : study.trials) {
    if (t.dev_attempted()) out += dev_line(t.index, t.dev_score, t.dev_error) + "\n";
  }
  return out;
}

Study parse_study(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      lines.push_back(text.substr(pos));
      break;
    }
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  const bool torn_tail = !text.empty() && text.back() != '\n';
  if (lines.empty()) throw Error(Errc::MalformedHeader, "empty study log");

  Study study;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& e) {
      if (torn_tail && i + 1 == lines.size() && i > 0) break;
      throw Error(Errc::MalformedHeader, "study line " + std::to_string(i + 1) + ": " + e.what());
    }
    try {
      if (i == 0) {
        if (j.value("format", "") != kFormat || j.value("version", 0) != kVersion) {
          throw Error(Errc::MalformedHeader, "not an optimerge study log");
        }
        for (const auto& d : j.at("space")) {
          study.space.dims.push_back({d.at("name").get<std::string>(), d.at("low").get<double>(),
                                      d.at("high").get<double>()});
        }
        study.space.has_it = j.at("has_it").get<bool>();
        const auto& s = j.at("sampler");
        study.sampler.gamma = s.at("gamma").get<double>();
        study.sampler.n_startup = s.at("n_startup").get<std::size_t>();
        study.sampler.candidates = s.at("candidates").get<std::size_t>();
        if (s.at("bandwidth").is_number()) study.sampler.fixed_bandwidth = s.at("bandwidth").get<double>();
        study.sampler.seed = s.at("seed").get<std::uint64_t>();
        study.batch_size = j.at("batch_size").get<std::size_t>();
        study.space.validate();
        study.sampler.validate();
        continue;
      }
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "trial") {
        Trial t;
        t.index = j.at("index").get<std::size_t>();
        t.batch_id = j.at("batch").get<std::size_t>();
        t.point = j.at("point").get<std::vector<double>>();
        if (!j.at("proxy_score").is_null()) t.score = j.at("proxy_score").get<double>();
        t.state = parse_state(j.at("state").get<std::string>());
        t.error = j.value("error", "");
        record(study, std::move(t));
      } else if (kind == "dev") {
        const auto index = j.at("index").get<std::size_t>();
        if (index >= study.trials.size()) throw Error(Errc::IndexGap, "dev line for unknown trial");
        auto& t = study.trials[index];
        if (!j.at("dev_score").is_null()) t.dev_score = j.at("dev_score").get<double>();
        t.dev_error = j.value("error", "");
        if (!t.dev_score && t.dev_error.empty()) t.dev_error = "failed";
      } else {
        throw Error(Errc::MalformedHeader, "unknown line kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw Error(Errc::MalformedHeader, "study line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return study;
}

Study load_study(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_study(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// --- StudyLog ----------------------------------------------------------------------

StudyLog::StudyLog(const std::filesystem::path& path, std::ios::openmode mode)
    : log_(path, mode), timings_(timings_path(path), mode) {
  if (!log_ || !timings_) throw Error(Errc::IoFailure, "cannot open study log '" + path.string() + "'");
}

StudyLog StudyLog::create(const std::filesystem::path& path, const Study& study) {
  StudyLog log(path, std::ios::out | std::ios::trunc);
  log.log_ << study_header_line(study) << '\n';
  for (const auto& t : study.trials) log.log_ << trial_line(t) << '\n';
  log.log_.flush();
  return log;
}

StudyLog StudyLog::append_to(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(Errc::IoFailure, "no study log at '" + path.string() + "'");
  truncate_torn_tail(path);
  truncate_torn_tail(timings_path(path));
  return StudyLog(path, std::ios::out | std::ios::app);
}

void StudyLog::append_trial(const Trial& trial, double merge_ms, double eval_ms) {
  log_ << trial_line(trial) << '\n';
  log_.flush();
  timings_ << json{{"index", trial.index}, {"phase", "proxy"}, {"merge_ms", merge_ms}, {"eval_ms", eval_ms}}.dump()
           << '\n';
  timings_.flush();
  if (!log_ || !timings_) throw Error(Errc::IoFailure, "study log write failed");
}

void StudyLog::append_dev(std::size_t index, std::optional<double> dev_score, double merge_ms, double eval_ms,
                          const std::string& error) {
  log_ << dev_line(index, dev_score, error) << '\n';
  log_.flush();
  timings_ << json{{"index", index}, {"phase", "dev"}, {"merge_ms", merge_ms}, {"eval_ms", eval_ms}}.dump() << '\n';
  timings_.flush();
  if (!log_ || !timings_) throw Error(Errc::IoFailure, "study log write failed");
}

std::filesystem::path StudyLog::timings_path(const std::filesystem::path& study_path) {
  auto p = study_path;
  p += ".timings";
  return p;
}

std::vector<TrialTiming> load_timings(const std::filesystem::path& study_path) {
  std::vector<TrialTiming> out;
  std::ifstream in(StudyLog::timings_path(study_path));
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("index").get<std::size_t>(), j.at("phase").get<std::string>(),
                     j.at("merge_ms").get<double>(), j.at("eval_ms").get<double>()});
    } catch (const json::exception&) {
      break;  // torn tail
    }
  }
  return out;
}

}  // namespace optimerge
