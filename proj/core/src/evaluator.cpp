#include "optimerge/evaluator.hpp"

#include <charconv>
#include <cmath>
#include <csignal>
#include <cstring>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

extern char** environ;

#include <json.hpp>

#include "optimerge/error.hpp"

namespace optimerge {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

double finite_or_throw(double v, std::string_view what) {
  if (!std::isfinite(v)) throw Error(Errc::NonFiniteScore, std::string(what) + " is not finite");
  return v;
}

}  // namespace

std::string_view to_string(EvalMode mode) noexcept { return mode == EvalMode::Dev ? "dev" : "proxy"; }

std::string substitute_command(std::string_view command_template, const std::filesystem::path& model,
                               EvalMode mode, std::size_t budget) {
  const std::pair<std::string_view, std::string> subs[] = {
      {"{model}", model.string()}, {"{mode}", std::string(to_string(mode))}, {"{budget}", std::to_string(budget)}};
  std::string out;
  std::size_t i = 0;
  while (i < command_template.size()) {
    bool replaced = false;
    for (const auto& [key, value] : subs) {
      if (command_template.substr(i, key.size()) == key) {
        out += value;
        i += key.size();
        replaced = true;
        break;
      }
    }
    if (!replaced) out += command_template[i++];
  }
  return out;
}

EvalResult parse_evaluator_output(std::string_view text) {
  if (!text.empty() && text.back() == '\n') text.remove_suffix(1);
  const auto nl = text.rfind('\n');
  const std::string_view line = trim(nl == std::string_view::npos ? text : text.substr(nl + 1));
  if (line.empty()) throw Error(Errc::UnparseableOutput, "evaluator printed an empty final line");

  EvalResult result;
  if (line.front() == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::UnparseableOutput, std::string("final line is not valid JSON: ") + e.what());
    }
    if (j.contains("sub_scores")) {
      const auto& subs = j["sub_scores"];
      if (!subs.is_object() || subs.empty()) throw Error(Errc::UnparseableOutput, "sub_scores must be a non-empty object");
      std::map<std::string, double> parsed;
      for (const auto& [task, v] : subs.items()) {
        if (!v.is_number()) throw Error(Errc::UnparseableOutput, "sub-score '" + task + "' is not a number");
        parsed[task] = finite_or_throw(v.get<double>(), "sub-score '" + task + "'");
      }
      result.sub_scores = std::move(parsed);
    }
    if (j.contains("score")) {
      if (!j["score"].is_number()) throw Error(Errc::UnparseableOutput, "score is not a number");
      result.score = finite_or_throw(j["score"].get<double>(), "score");
    } else if (result.sub_scores) {
      double sum = 0.0;
      for (const auto& [_, v] : *result.sub_scores) sum += v;
      result.score = sum / static_cast<double>(result.sub_scores->size());
    } else {
      throw Error(Errc::UnparseableOutput, "JSON output has neither score nor sub_scores");
    }
    if (result.sub_scores) {
      double sum = 0.0;
      for (const auto& [_, v] : *result.sub_scores) sum += v;
      const double mean = sum / static_cast<double>(result.sub_scores->size());
      if (std::fabs(mean - result.score) > 1e-9) {
        throw Error(Errc::UnparseableOutput, "score " + std::to_string(result.score) +
                                                 " is not the mean of its sub-scores (" + std::to_string(mean) + ")");
      }
    }
    return result;
  }

  double value = 0.0;
  const auto* first = line.data();
  const auto* last = line.data() + line.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw Error(Errc::UnparseableOutput, "final line '" + std::string(line) + "' is not a number");
  }
  result.score = finite_or_throw(value, "score");
  return result;
}

EvalResult evaluate_external(const EvalRequest& request, const std::filesystem::path& merged_path,
                             const ExternalCommand& command) {
  const std::string cmd = substitute_command(command.command_template, merged_path, request.mode, request.sample_budget);
  const std::string mode(to_string(request.mode));
  const std::string budget = std::to_string(request.sample_budget);
  const std::string workdir = request.workdir.string();

  // Everything the child needs is prepared before fork().
  std::vector<std::string> env_strings;
  for (char** e = environ; *e != nullptr; ++e) {
    const std::string_view kv(*e);
    if (kv.starts_with("OPTIMERGE_MODE=") || kv.starts_with("OPTIMERGE_BUDGET=")) continue;
    env_strings.emplace_back(kv);
  }
  env_strings.push_back("OPTIMERGE_MODE=" + mode);
  env_strings.push_back("OPTIMERGE_BUDGET=" + budget);
  std::vector<char*> envp;
  for (auto& kv : env_strings) envp.push_back(kv.data());
  envp.push_back(nullptr);
  std::string sh = "sh", dash_c = "-c", cmd_copy = cmd;
  char* argv[] = {sh.data(), dash_c.data(), cmd_copy.data(), nullptr};

  int fds[2];
  if (pipe2(fds, O_CLOEXEC) != 0) throw Error(Errc::SpawnFailure, std::string("pipe: ") + std::strerror(errno));
  const auto start = Clock::now();
  const pid_t pid = fork();
  if (pid < 0) {
    close(fds[0]);
    close(fds[1]);
    throw Error(Errc::SpawnFailure, std::string("fork: ") + std::strerror(errno));
  }
  if (pid == 0) {
    setpgid(0, 0);
    dup2(fds[1], STDOUT_FILENO);
    close(fds[0]);
    close(fds[1]);
    if (!workdir.empty() && chdir(workdir.c_str()) != 0) _exit(126);
    execve("/bin/sh", argv, envp.data());
    _exit(127);
  }
  close(fds[1]);
  fcntl(fds[0], F_SETFL, fcntl(fds[0], F_GETFL) | O_NONBLOCK);

  std::string output;
  bool timed_out = false;
  const auto deadline = start + command.timeout;
  char buf[4096];
  for (;;) {
    const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    if (remaining <= 0) {
      timed_out = true;
      break;
    }
    pollfd pfd{fds[0], POLLIN, 0};
    const int rc = poll(&pfd, 1, static_cast<int>(std::min<long long>(remaining, 1000)));
    if (rc < 0 && errno == EINTR) continue;
    if (rc <= 0) continue;
    const ssize_t n = read(fds[0], buf, sizeof buf);
    if (n > 0) {
      output.append(buf, static_cast<std::size_t>(n));
    } else if (n == 0) {
      break;
    } else if (errno != EAGAIN && errno != EINTR) {
      break;
    }
  }
  close(fds[0]);
  if (timed_out) kill(-pid, SIGKILL);

  int status = 0;
  // The pipe closing does not mean the shell exited; wait with the same deadline.
  while (!timed_out) {
    const pid_t r = waitpid(pid, &status, WNOHANG);
    if (r == pid) break;
    if (r < 0 && errno != EINTR) break;
    if (Clock::now() >= deadline) {
      timed_out = true;
      kill(-pid, SIGKILL);
      break;
    }
    usleep(2000);
  }
  if (timed_out) {
    waitpid(pid, &status, 0);
    throw Error(Errc::Timeout, "evaluator exceeded " + std::to_string(command.timeout.count()) + " ms");
  }

  if (WIFEXITED(status) && WEXITSTATUS(status) == 127) {
    throw Error(Errc::SpawnFailure, "evaluator command could not be executed: " + cmd);
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -WTERMSIG(status);
    throw Error(Errc::EvaluatorFailed, "evaluator exited with status " + std::to_string(code));
  }
  EvalResult result = parse_evaluator_output(output);
  result.wall_ms = elapsed_ms(start);
  return result;
}

// --- synthetic -------------------------------------------------------------------------

double sharp_ridge_score(std::span<const double> point, const SharpRidge& obj) {
  if (point.empty()) throw Error(Errc::InvalidArgument, "sharp ridge needs at least the IT weight");
  const double z = (point[0] - obj.center) / obj.width;
  double log_score = -z * z;
  for (std::size_t i = 1; i < point.size(); ++i) {
    const double c = point[i] / obj.cpt_scale;
    log_score -= c * c;
  }
  return std::exp(log_score);
}

double quadratic_score(std::span<const double> point, const Quadratic& obj) {
  if (point.size() != obj.centers.size()) throw Error(Errc::InvalidArgument, "quadratic centers do not match the point");
  double s = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) s += (point[i] - obj.centers[i]) * (point[i] - obj.centers[i]);
  return -s;
}

double tensor_map_distance(const TensorMap& a, const TensorMap& b) {
  if (a.tensors.size() != b.tensors.size()) throw Error(Errc::NameMismatch, "tensor maps differ in size");
  double ss = 0.0;
  for (const auto& [name, ta] : a.tensors) {
    const auto& tb = b.at(name);
    if (ta.shape != tb.shape) throw Error(Errc::ShapeMismatch, "shape of '" + name + "' differs");
    const auto va = ta.to_f32();
    const auto vb = tb.to_f32();
    for (std::size_t i = 0; i < va.size(); ++i) {
      const double d = double{va[i]} - double{vb[i]};
      ss += d * d;
    }
  }
  return std::sqrt(ss);
}

double hidden_target_score(const WeightVector& point, const HiddenTarget& obj) {
  if (!obj.base || !obj.target) throw Error(Errc::InvalidArgument, "hidden target objective needs base and target");
  const auto merged = merge_recipe(obj.method, *obj.base, obj.it_vec, obj.vecs, point, obj.params);
  return -tensor_map_distance(merged, *obj.target);
}

EvalResult SyntheticEvaluator::evaluate(const EvalRequest& request) {
  const auto start = Clock::now();
  EvalResult r;
  switch (kind_) {
    case Kind::SharpRidge: r.score = sharp_ridge_score(request.point.values, ridge_); break;
    case Kind::Quadratic: r.score = quadratic_score(request.point.values, quadratic_); break;
    case Kind::HiddenTarget: r.score = hidden_target_score(request.point, hidden_); break;
  }
  r.wall_ms = elapsed_ms(start);
  return r;
}

}  // namespace optimerge
