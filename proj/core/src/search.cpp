#include "optimerge/search.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <thread>

#include "optimerge/error.hpp"

namespace optimerge {

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  std::optional<EvalResult> result;
  std::string error;
};

std::filesystem::path make_workdir(const SearchOptions& options, std::string_view prefix, std::size_t index) {
  if (options.workdir_root.empty()) return {};
  char name[64];
  std::snprintf(name, sizeof name, "%.*s-%06zu", static_cast<int>(prefix.size()), prefix.data(), index);
  auto dir = options.workdir_root / name;
  std::filesystem::create_directories(dir);
  return dir;
}

Outcome evaluate_one(Evaluator& evaluator, EvalRequest request, const SearchOptions& options, std::string_view prefix) {
  Outcome out;
  try {
    request.workdir = make_workdir(options, prefix, request.trial_index);
    out.result = evaluator.evaluate(request);
    if (!std::isfinite(out.result->score)) throw Error(Errc::NonFiniteScore, "evaluator returned a non-finite score");
  } catch (const std::exception& e) {
    out.result.reset();
    out.error = e.what();
  }
  if (!request.workdir.empty() && !options.keep_workdirs) {
    std::error_code ec;
    std::filesystem::remove_all(request.workdir, ec);
  }
  return out;
}

// Runs `work(i)` for i in [0, n) on up to `workers` threads; results are
// returned by position, so completion order never matters.
std::vector<Outcome> run_all(std::size_t n, std::size_t workers, const std::function<Outcome(std::size_t)>& work) {
  std::vector<Outcome> out(n);
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = work(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) out[i] = work(i);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

}  // namespace

std::vector<std::size_t> top_trials(const Study& study, std::size_t k) {
  std::vector<std::size_t> scored;
  for (const auto& t : study.trials) {
    if (t.state == TrialState::Scored) scored.push_back(t.index);
  }
  std::stable_sort(scored.begin(), scored.end(), [&](std::size_t a, std::size_t b) {
    return *study.trials[a].score > *study.trials[b].score;
  });
  if (scored.size() > k) scored.resize(k);
  return scored;
}

std::vector<std::optional<double>> best_so_far(const Study& study) {
  std::vector<std::optional<double>> out;
  out.reserve(study.trials.size());
  std::optional<double> best;
  for (const auto& t : study.trials) {
    if (t.state == TrialState::Scored && (!best || *t.score > *best)) best = t.score;
    out.push_back(best);
  }
  return out;
}

SearchReport run_search(Study& study, Evaluator& evaluator, const SearchOptions& options, StudyLog* log) {
  study.space.validate();
  study.sampler.validate();
  const std::size_t T = options.trials;
  const std::size_t B = study.batch_size;
  if (B == 0) throw Error(Errc::InvalidArgument, "batch size must be positive");
  if (T < study.sampler.n_startup) {
    throw Error(Errc::InvalidArgument, "trial budget " + std::to_string(T) + " is below the startup count " +
                                           std::to_string(study.sampler.n_startup));
  }
  if (options.top_k == 0 || options.top_k > T) throw Error(Errc::InvalidArgument, "top-K must lie in [1, T]");
  if (study.trials.size() > T) throw Error(Errc::InvalidArgument, "study already holds more trials than the budget");

  const std::size_t workers = evaluator.concurrent_safe() ? std::max<std::size_t>(options.parallel, 1) : 1;
  SearchReport report;
  const auto search_start = Clock::now();

  while (study.trials.size() < T) {
    if (options.stop_after && study.trials.size() >= *options.stop_after) {
      report.search_ms = ms_since(search_start);
      return report;
    }
    const std::size_t done = study.trials.size();
    const std::size_t batch_id = done / B;
    const std::size_t first = batch_id * B;
    const std::size_t batch_n = std::min(B, T - first);

    std::vector<WeightVector> points;
    if (done == first) {
      points = suggest_batch(study, batch_n);
    } else {
      // Resuming inside a batch: regenerate it from the trials that preceded it.
      Study prefix = study;
      prefix.trials.resize(first);
      points = suggest_batch(prefix, batch_n);
      for (std::size_t i = first; i < done; ++i) {
        if (study.trials[i].point != points[i - first].values) {
          throw Error(Errc::InvalidArgument, "study log does not match its sampler configuration at trial " +
                                                 std::to_string(i));
        }
      }
    }

    const std::size_t pending = first + batch_n - done;
    auto outcomes = run_all(pending, workers, [&](std::size_t j) {
      EvalRequest req;
      req.point = points[done - first + j];
      req.mode = EvalMode::Proxy;
      req.sample_budget = options.proxy_budget;
      req.trial_index = done + j;
      return evaluate_one(evaluator, std::move(req), options, "trial");
    });

    std::size_t failures = 0;
    for (std::size_t j = 0; j < pending; ++j) {
      if (options.stop_after && study.trials.size() >= *options.stop_after) break;
      Trial t;
      t.index = done + j;
      t.batch_id = batch_id;
      t.point = points[done - first + j].values;
      const auto& o = outcomes[j];
      if (o.result) {
        t.state = TrialState::Scored;
        t.score = o.result->score;
        report.merge_ms += o.result->merge_ms;
        report.eval_ms += o.result->wall_ms;
      } else {
        t.state = TrialState::Failed;
        t.error = o.error;
        ++failures;
      }
      if (log) log->append_trial(t, o.result ? o.result->merge_ms : 0.0, o.result ? o.result->wall_ms : 0.0);
      record(study, std::move(t));
    }
    if (failures == pending && pending > 0) {
      throw Error(Errc::BatchExhausted, "every evaluation in batch " + std::to_string(batch_id) +
                                            " failed; last error: " + outcomes.back().error);
    }
  }
  report.search_ms = ms_since(search_start);

  if (options.stop_after && study.trials.size() >= *options.stop_after && *options.stop_after < T) return report;

  const auto reeval_start = Clock::now();
  report.top_k = top_trials(study, options.top_k);
  if (report.top_k.empty()) throw Error(Errc::EvaluatorFailed, "no scored trial to re-evaluate");
  std::vector<std::size_t> todo;
  for (auto idx : report.top_k) {
    if (!study.trials[idx].dev_attempted()) todo.push_back(idx);
  }
  auto outcomes = run_all(todo.size(), workers, [&](std::size_t j) {
    const auto& t = study.trials[todo[j]];
    EvalRequest req;
    req.point = study.space.make_point(t.point);
    req.mode = EvalMode::Dev;
    req.sample_budget = options.dev_budget;
    req.trial_index = t.index;
    return evaluate_one(evaluator, std::move(req), options, "dev");
  });
  for (std::size_t j = 0; j < todo.size(); ++j) {
    auto& t = study.trials[todo[j]];
    const auto& o = outcomes[j];
    if (o.result) {
      t.dev_score = o.result->score;
      report.merge_ms += o.result->merge_ms;
      report.eval_ms += o.result->wall_ms;
    } else {
      t.dev_error = o.error.empty() ? "failed" : o.error;
    }
    if (log) {
      log->append_dev(t.index, t.dev_score, o.result ? o.result->merge_ms : 0.0, o.result ? o.result->wall_ms : 0.0,
                      t.dev_error);
    }
  }

  std::optional<std::size_t> best;
  for (auto idx : report.top_k) {
    const auto& t = study.trials[idx];
    if (t.dev_score && (!best || *t.dev_score > *study.trials[*best].dev_score)) best = idx;
  }
  if (!best) throw Error(Errc::EvaluatorFailed, "every top-K re-evaluation failed");
  const auto& winner = study.trials[*best];
  report.completed = true;
  report.best_index = winner.index;
  report.best = study.space.make_point(winner.point);
  report.best_proxy = *winner.score;
  report.best_dev = winner.dev_score;
  report.reeval_ms = ms_since(reeval_start);
  return report;
}

std::optional<std::size_t> grid_size(std::size_t dims, std::size_t points, std::size_t cap) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < dims; ++i) {
    if (n > cap / points) return std::nullopt;
    n *= points;
  }
  if (n > cap) return std::nullopt;
  return n;
}

GridResult grid_search(const SearchSpace& space, Evaluator& evaluator, std::size_t points, std::size_t cap,
                       std::size_t proxy_budget) {
  space.validate();
  if (points < 2) throw Error(Errc::InvalidArgument, "grid search needs at least 2 points per dimension");
  const std::size_t d = space.dims.size();
  const auto total = grid_size(d, points, cap);
  if (!total) {
    throw Error(Errc::BudgetOverflow, std::to_string(points) + "^" + std::to_string(d) + " grid points exceed the cap of " +
                                          std::to_string(cap));
  }

  GridResult result;
  result.trials.reserve(*total);
  std::vector<std::size_t> digits(d, 0);
  std::optional<std::size_t> best;
  for (std::size_t n = 0; n < *total; ++n) {
    std::vector<double> p(d);
    for (std::size_t k = 0; k < d; ++k) {
      const auto& dim = space.dims[k];
      // Pin the last grid point to `high` exactly.
      p[k] = digits[k] + 1 == points
                 ? dim.high
                 : dim.low + (dim.high - dim.low) * static_cast<double>(digits[k]) / static_cast<double>(points - 1);
    }
    Trial t;
    t.index = n;
    t.point = p;
    try {
      EvalRequest req;
      req.point = space.make_point(p);
      req.sample_budget = proxy_budget;
      req.trial_index = n;
      const auto r = evaluator.evaluate(req);
      if (!std::isfinite(r.score)) throw Error(Errc::NonFiniteScore, "non-finite grid score");
      t.state = TrialState::Scored;
      t.score = r.score;
      if (!best || r.score > *result.trials[*best].score) best = n;
    } catch (const std::exception& e) {
      t.state = TrialState::Failed;
      t.error = e.what();
    }
    result.trials.push_back(std::move(t));
    for (std::size_t k = d; k-- > 0;) {
      if (++digits[k] < points) break;
      digits[k] = 0;
    }
  }
  if (!best) throw Error(Errc::BatchExhausted, "every grid evaluation failed");
  result.best = space.make_point(result.trials[*best].point);
  result.best_score = *result.trials[*best].score;
  return result;
}

}  // namespace optimerge
