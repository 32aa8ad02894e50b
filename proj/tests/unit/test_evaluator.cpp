#include <doctest.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "optimerge/error.hpp"
#include "optimerge/evaluator.hpp"

using namespace optimerge;
using namespace std::chrono_literals;
using optimerge::testing::TempDir;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an optimerge::Error");
  return Errc::InvalidArgument;
}

EvalResult run(const std::string& cmd, const std::filesystem::path& workdir = {},
               std::chrono::milliseconds timeout = 10s, EvalMode mode = EvalMode::Proxy, std::size_t budget = 100) {
  EvalRequest req;
  req.point = WeightVector({0.5});
  req.mode = mode;
  req.sample_budget = budget;
  req.workdir = workdir;
  return evaluate_external(req, "/tmp/model.safetensors", ExternalCommand{cmd, timeout});
}

}  // namespace

TEST_CASE("final-line parsing") {
  CHECK(parse_evaluator_output("0.5").score == 0.5);
  CHECK(parse_evaluator_output("0.5\n").score == 0.5);
  CHECK(parse_evaluator_output("loading...\nstep 3\n  -1.25e-1 \n").score == -0.125);
  CHECK(parse_evaluator_output("+2").score == 2.0);
  CHECK_FALSE(parse_evaluator_output("0.5").sub_scores.has_value());

  const auto j = parse_evaluator_output(R"({"score":0.7,"sub_scores":{"gsm8k":0.8,"mgsm":0.6}})");
  CHECK(j.score == 0.7);
  REQUIRE(j.sub_scores.has_value());
  CHECK(j.sub_scores->at("gsm8k") == 0.8);
  CHECK(j.sub_scores->size() == 2);
  CHECK(parse_evaluator_output(R"({"sub_scores":{"a":1,"b":0}})").score == 0.5);

  CHECK(code_of([] { parse_evaluator_output(""); }) == Errc::UnparseableOutput);
  CHECK(code_of([] { parse_evaluator_output("0.5\n\n"); }) == Errc::UnparseableOutput);
  CHECK(code_of([] { parse_evaluator_output("score: 0.5"); }) == Errc::UnparseableOutput);
  CHECK(code_of([] { parse_evaluator_output("0.5\nnot a number"); }) == Errc::UnparseableOutput);
  CHECK(code_of([] { parse_evaluator_output("{\"score\":"); }) == Errc::UnparseableOutput);
  CHECK(code_of([] { parse_evaluator_output(R"({"score":0.9,"sub_scores":{"a":0.8,"b":0.6}})"); }) ==
        Errc::UnparseableOutput);
  CHECK(code_of([] { parse_evaluator_output("nan"); }) == Errc::NonFiniteScore);
  CHECK(code_of([] { parse_evaluator_output("inf"); }) == Errc::NonFiniteScore);
}

TEST_CASE("command template substitution") {
  CHECK(substitute_command("eval {model} --mode {mode} -n {budget} {model}", "/m/x.st", EvalMode::Dev, 300) ==
        "eval /m/x.st --mode dev -n 300 /m/x.st");
  CHECK(substitute_command("{unknown} {mode", "/m", EvalMode::Proxy, 1) == "{unknown} {mode");
}

TEST_CASE("external evaluator contract") {
  CHECK(run("echo 0.5").score == 0.5);
  CHECK_FALSE(run("echo 0.5").sub_scores.has_value());

  const auto j = run(R"(echo '{"score":0.7,"sub_scores":{"gsm8k":0.8,"mgsm":0.6}}')");
  CHECK(j.score == 0.7);
  CHECK(j.sub_scores->size() == 2);
  CHECK(j.wall_ms >= 0.0);

  CHECK(code_of([] { run("echo 0.5; exit 1"); }) == Errc::EvaluatorFailed);
  CHECK(code_of([] { run("echo hello"); }) == Errc::UnparseableOutput);
  CHECK(code_of([] { run("/nonexistent/evaluator-binary"); }) == Errc::SpawnFailure);
  CHECK(code_of([] { run("kill -9 $$"); }) == Errc::EvaluatorFailed);
}

TEST_CASE("placeholders and environment reach the command") {
  CHECK(run("test \"$OPTIMERGE_MODE\" = dev && test \"$OPTIMERGE_BUDGET\" = 300 && echo 1", {}, 10s, EvalMode::Dev,
            300)
            .score == 1.0);
  CHECK(run("test {mode} = proxy && test {budget} = 7 && test {model} = /tmp/model.safetensors && echo 2", {}, 10s,
            EvalMode::Proxy, 7)
            .score == 2.0);
  TempDir dir;
  run("pwd > where.txt; echo 0", dir.path());
  std::ifstream in(dir / "where.txt");
  std::string where;
  std::getline(in, where);
  CHECK(std::filesystem::equivalent(where, dir.path()));
}

TEST_CASE("timeout kills the evaluator and its children") {
  const auto start = std::chrono::steady_clock::now();
  CHECK(code_of([] { run("sleep 30", {}, 300ms); }) == Errc::Timeout);
  // A grandchild holding the pipe open must not extend the wait either.
  CHECK(code_of([] { run("sh -c 'sleep 30' & echo 0.5; wait", {}, 300ms); }) == Errc::Timeout);
  CHECK(std::chrono::steady_clock::now() - start < 5s);
}

TEST_CASE("sharp ridge closed form") {
  CHECK(sharp_ridge_score(std::vector<double>{0.6, 0.0, 0.0, 0.0}) == 1.0);
  const double v = sharp_ridge_score(std::vector<double>{0.3, 0.0, 0.0, 0.0});
  CHECK(v == doctest::Approx(std::exp(-36.0)).epsilon(1e-12));
  CHECK(v == doctest::Approx(2.3e-16).epsilon(0.01));
  CHECK(sharp_ridge_score(std::vector<double>{0.6, 0.3}) == doctest::Approx(std::exp(-1.0)));
  // Grid spacing 0.5 cannot reach the ridge: the nearest grid value to 0.6 is 0.5.
  CHECK(sharp_ridge_score(std::vector<double>{0.5, 0.0, 0.0, 0.0}) == doctest::Approx(std::exp(-4.0)));
  CHECK_THROWS_AS(sharp_ridge_score(std::vector<double>{}), Error);
}

TEST_CASE("quadratic objective") {
  CHECK(quadratic_score(std::vector<double>{1.0, 2.0}, Quadratic{{1.0, 0.0}}) == -4.0);
  CHECK_THROWS_AS(quadratic_score(std::vector<double>{1.0}, Quadratic{{1.0, 0.0}}), Error);
}

TEST_CASE("hidden target is zero at the planted optimum and deterministic") {
  std::mt19937_64 rng(3);
  const auto base = optimerge::testing::random_model(rng, 6, 5);
  std::vector<DistributionVector> vecs;
  for (int i = 0; i < 3; ++i) {
    vecs.push_back(extract(optimerge::testing::perturbed(rng, base, 0.2), base, {}, "b", "v" + std::to_string(i)));
  }
  const WeightVector star({0.3, 0.7, 0.5});
  const auto target = compose(base, nullptr, vecs, star);
  HiddenTarget obj{&base, nullptr, vecs, &target, MergeMethod::TaskArithmetic, {}};
  SyntheticEvaluator ev(obj);
  EvalRequest req;
  req.point = star;
  CHECK(ev.evaluate(req).score == 0.0);
  req.point = WeightVector({0.3, 0.6, 0.5});
  const double off = ev.evaluate(req).score;
  CHECK(off < 0.0);
  CHECK(ev.evaluate(req).score == off);
  // Moving one weight by 0.1 moves the merge by 0.1 times that vector.
  CHECK(-off == doctest::Approx(0.1 * tensor_map_distance(vecs[1].delta, TensorMap{[&] {
                                  TensorMap z;
                                  for (const auto& [n, t] : vecs[1].delta.tensors) {
                                    z.insert(n, Tensor::from_f32(std::vector<float>(t.numel(), 0.0f), t.shape));
                                  }
                                  return z;
                                }()}))
                    .epsilon(1e-4));
}

TEST_CASE("tensor distance") {
  TensorMap a, b;
  a.insert("x", Tensor::from_f32(std::vector<float>{3.0f, 0.0f}, {2}));
  b.insert("x", Tensor::from_f32(std::vector<float>{0.0f, 4.0f}, {2}));
  CHECK(tensor_map_distance(a, b) == 5.0);
  TensorMap c;
  CHECK_THROWS_AS(tensor_map_distance(a, c), Error);
}
