#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "optimerge/weights.hpp"

namespace optimerge {

struct Dimension {
  std::string name;
  double low = 0.0;
  double high = 1.0;

  friend bool operator==(const Dimension&, const Dimension&) = default;
};

/// Box-bounded merge-weight space. When `has_it` is set the first dimension
/// is the IT weight.
struct SearchSpace {
  std::vector<Dimension> dims;
  bool has_it = false;

  /// Throws EmptySpace / InvalidArgument on violated invariants.
  void validate() const;
  bool contains(const std::vector<double>& point) const;
  std::vector<std::string> names() const;
  WeightVector make_point(std::vector<double> values) const;

  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

enum class TrialState { Pending, Scored, Failed };

struct Trial {
  std::size_t index = 0;
  std::size_t batch_id = 0;
  std::vector<double> point;
  TrialState state = TrialState::Pending;
  std::optional<double> score;      // proxy score during the search
  std::optional<double> dev_score;  // set by the top-K re-evaluation
  std::string error;
  std::string dev_error;  // non-empty when the re-evaluation failed

  bool dev_attempted() const { return dev_score.has_value() || !dev_error.empty(); }

  friend bool operator==(const Trial&, const Trial&) = default;
};

struct TPEConfig {
  double gamma = 0.1;
  std::size_t n_startup = 20;
  std::size_t candidates = 24;
  /// Unset selects the per-dimension Scott rule; otherwise a fixed bandwidth
  /// in the units of every dimension.
  std::optional<double> fixed_bandwidth;
  std::uint64_t seed = 0;

  void validate() const;

  friend bool operator==(const TPEConfig&, const TPEConfig&) = default;
};

/// Persistent state of one weight search. The sampler stream is a pure
/// function of (seed, batch id, slot), so the trial log alone is enough to
/// resume.
struct Study {
  SearchSpace space;
  TPEConfig sampler;
  std::size_t batch_size = 1;
  std::vector<Trial> trials;

  std::size_t scored_count() const;
  std::size_t next_batch_id() const;

  friend bool operator==(const Study&, const Study&) = default;
};

/// Appends a trial. Throws IndexGap unless trial.index == trials.size(),
/// NonFiniteScore for a Scored trial without a finite score.
void record(Study& study, Trial trial);

std::string_view to_string(TrialState s) noexcept;

// --- JSON-lines persistence --------------------------------------------------------
//
// Line 1 is the header {format, version, space, has_it, sampler, batch_size};
// every later line is {"kind":"trial",...} or {"kind":"dev",...}.

std::string study_header_line(const Study& study);
std::string trial_line(const Trial& trial);
std::string dev_line(std::size_t index, std::optional<double> dev_score, const std::string& error = {});

/// Whole-study serialization (header + trial lines + dev lines).
std::string serialize_study(const Study& study);
/// Parses a study log. An incomplete last line (no trailing newline, not
/// valid JSON) is ignored, as left by an interrupted writer.
Study parse_study(std::string_view text);
Study load_study(const std::filesystem::path& path);

/// Append-only writer for a study log plus a sidecar with wall-clock timings
/// (kept out of the main log so it stays byte-deterministic).
class StudyLog {
 public:
  /// Creates (truncating) the log and writes the header.
  static StudyLog create(const std::filesystem::path& path, const Study& study);
  /// Opens an existing log for appending, dropping a torn final line.
  static StudyLog append_to(const std::filesystem::path& path);

  void append_trial(const Trial& trial, double merge_ms, double eval_ms);
  void append_dev(std::size_t index, std::optional<double> dev_score, double merge_ms, double eval_ms,
                  const std::string& error = {});

  static std::filesystem::path timings_path(const std::filesystem::path& study_path);

 private:
  StudyLog(const std::filesystem::path& path, std::ios::openmode mode);
  std::ofstream log_;
  std::ofstream timings_;
};

struct TrialTiming {
  std::size_t index = 0;
  std::string phase;  // "proxy" or "dev"
  double merge_ms = 0.0;
  double eval_ms = 0.0;
};

std::vector<TrialTiming> load_timings(const std::filesystem::path& study_path);

}  // namespace optimerge
