#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "oracles/stl_oracle.hpp"
#include "tdmat/error.hpp"
#include "tdmat/stl.hpp"

using namespace tdmat;
using namespace tdmat::stl;

namespace {

Trajectory to_trajectory(const oracle::Trace& tr, int entities) {
  std::vector<std::string> names;
  for (int k = 0; k < entities; ++k) names.push_back(oracle::entity(k));
  Trajectory out(names);
  for (const auto& s : tr) {
    std::vector<Vec2> pos;
    for (const auto& p : s) pos.push_back({p.x, p.y});
    out.push_state(pos);
  }
  return out;
}

Trajectory line_trace(const std::vector<double>& xs) {
  Trajectory t({"a", "b"});
  for (double x : xs) t.push_state({{x, 0.0}, {0.0, 0.0}});
  return t;
}

}  // namespace

TEST_CASE("atom margin is threshold minus euclidean distance") {
  Trajectory t({"a", "b"});
  t.push_state({{3.0, 4.0}, {0.0, 0.0}});
  const Spec s = make_distance("a", "b", 6.0);
  CHECK(robustness(s, t, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(evaluate_boolean(s, t, 0));
  CHECK(robustness(negate(s), t, 0) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("true is +infinity and its negation -infinity") {
  Trajectory t = line_trace({0.0});
  CHECK(robustness(make_true(), t, 0) == std::numeric_limits<double>::infinity());
  CHECK(robustness(negate(make_true()), t, 0) == -std::numeric_limits<double>::infinity());
  CHECK(evaluate_boolean(make_true(), t, 0));
}

TEST_CASE("eventually takes the best margin inside the window") {
  // distances 2, 1, 0.5, 3 against threshold 1
  Trajectory t = line_trace({2.0, 1.0, 0.5, 3.0});
  const Spec near = make_distance("a", "b", 1.0);
  CHECK(robustness(eventually(0, 3, near), t, 0) == 0.5);
  CHECK(robustness(eventually(0, 1, near), t, 0) == 0.0);
  CHECK_FALSE(evaluate_boolean(eventually(0, 1, near), t, 0));  // strict inequality at 0
  CHECK(robustness(eventually(3, 3, near), t, 0) == -2.0);
}

TEST_CASE("strict windows past the end throw, prefix windows clip") {
  Trajectory t = line_trace({2.0, 0.5});
  const Spec f = eventually(0, 5, make_distance("a", "b", 1.0));
  CHECK_THROWS_AS(robustness(f, t, 0), TraceError);
  CHECK_THROWS_AS(evaluate_boolean(f, t, 0), TraceError);
  CHECK(prefix_robustness(f, t) == 0.5);
  CHECK(prefix_robustness(f, TraceView(t, 1)) == -1.0);
  const Spec late = eventually(3, 5, make_distance("a", "b", 1.0));
  CHECK(prefix_robustness(late, t) == kDefaultRobustnessFloor);
  CHECK(prefix_robustness(late, t, -4.0) == -4.0);
}

TEST_CASE("unknown entity raises TraceError") {
  Trajectory t = line_trace({0.0});
  CHECK_THROWS_AS(robustness(make_distance("a", "zz", 1.0), t, 0), TraceError);
}

TEST_CASE("horizon sums nested windows") {
  const Spec p = make_distance("a", "b", 1.0);
  CHECK(make_true().horizon() == 0);
  CHECK(eventually(2, 5, both(p, eventually(0, 3, p))).horizon() == 8);
  CHECK(either(eventually(0, 1, p), negate(eventually(1, 4, p))).horizon() == 4);
}

TEST_CASE("parser precedence and round trip") {
  const Spec s = parse_spec("not dist(a,b) < 1 and F[0,2] dist(a, b) < 0.5 or true");
  const Spec p = make_distance("a", "b", 1.0);
  const Spec q = make_distance("a", "b", 0.5);
  CHECK(s == either(both(negate(p), eventually(0, 2, q)), make_true()));
  CHECK(parse_spec(to_string(s)) == s);
  CHECK(parse_spec("a and b and c", [] {
          PredicateRegistry r;
          for (const char* n : {"a", "b", "c"}) r.add(n, [](const TraceView&, std::size_t) { return 1.0; });
          return r;
        }()).horizon() == 0);
}

TEST_CASE("parser reports byte offsets") {
  auto position_of = [](const char* text) -> std::size_t {
    try {
      parse_spec(text);
    } catch (const ParseError& e) {
      return e.position();
    }
    FAIL("expected a ParseError");
    return 0;
  };
  CHECK(position_of("F[3,1] true") == 0);
  CHECK(position_of("F[-1,2] true") == 2);
  CHECK(position_of("true and unknown_atom") == 9);
  CHECK(position_of("(true") == 5);
  CHECK(position_of("dist(a,b) > 1") == 10);
}

TEST_CASE("named predicates use the registry") {
  PredicateRegistry reg;
  reg.add("up", [](const TraceView& tr, std::size_t t) { return tr.trace().position(t, 0)[1]; });
  Trajectory t({"a"});
  t.push_state({{0.0, -1.0}});
  t.push_state({{0.0, 2.0}});
  const Spec s = parse_spec("F[0,1] up", reg);
  CHECK(robustness(s, t, 0) == 2.0);
  CHECK(evaluate_boolean(s, t, 0));
}

TEST_CASE("robustness agrees with the brute-force oracle on random formulas") {
  std::mt19937_64 g(2024);
  const int entities = 3;
  for (int k = 0; k < 200; ++k) {
    const auto f = oracle::random_formula(g, 1 + static_cast<int>(g() % 4), entities);
    const int h = oracle::horizon(f);
    const int len = std::max(1, std::min(30, h + 1 + static_cast<int>(g() % 10)));
    const auto tr = oracle::random_trace(g, len, entities);
    const Trajectory traj = to_trajectory(tr, entities);
    const Spec s = parse_spec(oracle::text(f));
    REQUIRE(s.horizon() == h);
    const auto sig = oracle::signal(f, tr, false, kDefaultRobustnessFloor);
    const auto truth = oracle::truth(f, tr);
    for (int t = 0; t < len; ++t) {
      if (!sig[t]) {
        CHECK_THROWS_AS(robustness(s, traj, t), TraceError);
        continue;
      }
      const double rho = robustness(s, traj, t);
      CHECK(rho == *sig[t]);
      REQUIRE(truth[t].has_value());
      CHECK(evaluate_boolean(s, traj, t) == *truth[t]);
    }
    for (int n = 1; n <= len; ++n) {
      oracle::Trace prefix(tr.begin(), tr.begin() + n);
      CHECK(prefix_robustness(s, TraceView(traj, n)) ==
            *oracle::signal(f, prefix, true, kDefaultRobustnessFloor)[0]);
    }
  }
}
