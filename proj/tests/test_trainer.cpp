#include <cmath>
#include <random>

#include "doctest.h"
#include "tdmat/trainer.hpp"

using namespace tdmat;
using namespace tdmat::train;
using ad::Tape;
using ad::Tensor;

namespace {

struct Setup {
  game::GameSpec game;
  std::vector<stl::Spec> specs;
  model::ModelConfig model;
};

Setup toy(int agents = 2, int horizon = 4) {
  Setup s;
  s.game.n_agents = agents;
  s.game.horizon = horizon;
  s.specs = game::build_task_1(agents, horizon);
  s.model.embed_dim = 16;
  s.model.n_heads = 2;
  s.model.n_encoder_blocks = 1;
  s.model.n_value_blocks = 1;
  s.model.n_decoder_blocks = 1;
  s.model.n_agents = agents;
  s.model.horizon = horizon;
  s.model.obs_dim = s.game.observation_width();
  return s;
}

RolloutBuffer collect(const Setup& s, const model::TdmatPolicy& p, int d, int threads,
                      std::uint64_t seed = 1) {
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < d; ++k) seeds.push_back(episode_seed(seed, 0, k));
  return collect_rollouts(s.game, s.specs, p, seeds, threads);
}

// A_t = sum_{k >= t} (gamma lambda)^(k - t) delta_k, evaluated directly.
std::vector<double> gae_double_sum(const std::vector<double>& r, const std::vector<double>& v,
                                   double gamma, double lambda) {
  std::vector<double> out(r.size(), 0.0);
  for (std::size_t t = 0; t < r.size(); ++t) {
    for (std::size_t k = t; k < r.size(); ++k) {
      const double delta = r[k] + gamma * v[k + 1] - v[k];
      out[t] += std::pow(gamma * lambda, static_cast<double>(k - t)) * delta;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("GAE collapses to TD errors and Monte Carlo residuals") {
  std::mt19937_64 g(1);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<double> r(7), v(8);
  for (double& x : r) x = u(g);
  for (double& x : v) x = u(g);
  const auto td = compute_gae(r, v, 0.9, 0.0);
  for (std::size_t t = 0; t < r.size(); ++t) CHECK(td[t] == r[t] + 0.9 * v[t + 1] - v[t]);
  v.back() = 0.0;
  const auto mc = compute_gae(r, v, 1.0, 1.0);
  for (std::size_t t = 0; t < r.size(); ++t) {
    double ret = 0.0;
    for (std::size_t k = t; k < r.size(); ++k) ret += r[k];
    CHECK(std::abs(mc[t] - (ret - v[t])) <= 1e-12);
  }
  CHECK_THROWS_AS(compute_gae(r, std::vector<double>(3), 0.9, 0.9), std::invalid_argument);
}

TEST_CASE("GAE recursion matches the double sum") {
  std::mt19937_64 g(2);
  std::uniform_real_distribution<double> u(-3.0, 3.0), unit(0.0, 1.0);
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 1 + g() % 30;
    std::vector<double> r(n), v(n + 1);
    for (double& x : r) x = u(g);
    for (double& x : v) x = u(g);
    const double gamma = unit(g), lambda = unit(g);
    const auto a = compute_gae(r, v, gamma, lambda);
    const auto b = gae_double_sum(r, v, gamma, lambda);
    for (std::size_t t = 0; t < n; ++t) CHECK(std::abs(a[t] - b[t]) <= 1e-10);
  }
}

TEST_CASE("rollout buffers have D episodes of T steps") {
  const Setup s = toy();
  model::TdmatPolicy p(s.model, 1);
  const RolloutBuffer b = collect(s, p, 3, 1);
  REQUIRE(b.episodes.size() == 3);
  for (const auto& ep : b.episodes) {
    CHECK(ep.steps() == 4);
    CHECK(ep.observations.size() == 5);
    CHECK(ep.log_probs.size() == 4);
    CHECK(ep.values.size() == 4);
    CHECK(ep.team_rewards.size() == 4);
    CHECK(ep.robustness == stl::robustness(stl::conjoin(s.specs), stl::TraceView(ep.trajectory), 0));
  }
  CHECK(b.episodes[0].seed != b.episodes[1].seed);
  const EpisodeBuffer single = collect_episode(s.game, s.specs, p, b.episodes[1].seed);
  CHECK(single == b.episodes[1]);
}

TEST_CASE("parallel and sequential collection give identical buffers") {
  const Setup s = toy(3, 5);
  model::TdmatPolicy p(s.model, 2);
  CHECK(collect(s, p, 4, 4) == collect(s, p, 4, 1));
}

TEST_CASE("stored log-probs are reproduced from the snapshot") {
  const Setup s = toy(3, 5);
  model::TdmatPolicy p(s.model, 3);
  std::vector<std::uint64_t> seeds{11, 12};
  const RolloutBuffer b = collect_rollouts(s.game, s.specs, p, seeds, 1, true);
  const auto reps = encoder_snapshot(p, b);
  for (std::size_t e = 0; e < b.episodes.size(); ++e) {
    const Tensor lp = recompute_log_probs(p, b.episodes[e], reps[e]);
    for (std::size_t t = 0; t < b.episodes[e].steps(); ++t) {
      for (int i = 0; i < 3; ++i) CHECK(std::abs(lp(t, i) - b.episodes[e].log_probs[t][i]) <= 1e-12);
    }
    Tape tape(false);
    const Tensor v = episode_values(tape, p, b.episodes[e], true).value();
    for (std::size_t t = 0; t < b.episodes[e].steps(); ++t) {
      for (int i = 0; i < 3; ++i) CHECK(std::abs(v(t, i) - b.episodes[e].values[t][i]) <= 1e-12);
    }
  }
}

TEST_CASE("encoder/value loss: single agent, single step by hand") {
  Setup s = toy(1, 1);
  model::TdmatPolicy p(s.model, 4);
  const RolloutBuffer b = collect(s, p, 1, 1);
  Tape tape;
  const double loss = loss_encoder_value(tape, p, b, 0.99).value().item();
  const double v0 = b.episodes[0].values[0][0];
  const double r0 = b.episodes[0].team_rewards[0];
  CHECK(loss == doctest::Approx((r0 - v0) * (r0 - v0)).epsilon(1e-12));
}

TEST_CASE("encoder/value loss vanishes for zero rewards and a zero head") {
  const Setup s = toy();
  model::TdmatPolicy p(s.model, 5);
  RolloutBuffer b = collect(s, p, 2, 1);
  for (auto& ep : b.episodes) std::fill(ep.team_rewards.begin(), ep.team_rewards.end(), 0.0);
  for (double& w : p.params().at("val.head.w").data()) w = 0.0;
  for (double& w : p.params().at("val.head.b").data()) w = 0.0;
  Tape tape;
  CHECK(loss_encoder_value(tape, p, b, 0.99).value().item() == 0.0);
}

TEST_CASE("batched and per-prefix value losses agree") {
  const Setup s = toy(2, 5);
  model::TdmatPolicy p(s.model, 6);
  const RolloutBuffer b = collect(s, p, 2, 1);
  Tape t1, t2;
  auto l1 = loss_encoder_value(t1, p, b, 0.99, true);
  auto l2 = loss_encoder_value(t2, p, b, 0.99, false);
  CHECK(l1.value().item() == l2.value().item());
  const auto g1 = t1.backward(l1, p.params());
  const auto g2 = t2.backward(l2, p.params());
  for (const auto& [name, g] : g1) {
    for (std::size_t k = 0; k < g.numel(); ++k) CHECK(std::abs(g[k] - g2.at(name)[k]) <= 1e-12);
  }
}

TEST_CASE("decoder loss at theta_old is minus the summed advantage") {
  const Setup s = toy(2, 4);
  model::TdmatPolicy p(s.model, 7);
  const RolloutBuffer b = collect(s, p, 3, 1);
  const auto adv = compute_advantages(b, 0.99, 0.95, true);
  const auto reps = encoder_snapshot(p, b);
  Tape tape;
  double expect = 0.0;
  for (const auto& a : adv) {
    for (double x : a) expect -= x;
  }
  expect /= 3.0;
  CHECK(loss_decoder(tape, p, b, reps, adv, 0.2).value().item() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("clipped surrogate picks the clipped term") {
  const Setup s = toy(2, 3);
  model::TdmatPolicy p(s.model, 8);
  RolloutBuffer b = collect(s, p, 1, 1);
  const auto reps = encoder_snapshot(p, b);
  // old probabilities are 1/1.5 of the current ones: ratio 1.5 everywhere
  for (auto& row : b.episodes[0].log_probs) {
    for (double& x : row) x -= std::log(1.5);
  }
  const std::vector<std::vector<double>> ones{{1.0, 1.0, 1.0}};
  Tape tape;
  // -(1/N) sum_i sum_t 1.2 = -3 * 1.2
  CHECK(loss_decoder(tape, p, b, reps, ones, 0.2).value().item() == doctest::Approx(-3.6).epsilon(1e-12));
}

TEST_CASE("losses touch only their own parameter group") {
  const Setup s = toy(2, 4);
  model::TdmatPolicy p(s.model, 9);
  const RolloutBuffer b = collect(s, p, 2, 1);
  const auto adv = compute_advantages(b, 0.99, 0.95, true);
  const auto reps = encoder_snapshot(p, b);
  auto is_zero = [](const Tensor& g) {
    for (double v : g.data()) {
      if (v != 0.0) return false;
    }
    return true;
  };
  Tape te;
  const auto ge = te.backward(loss_encoder_value(te, p, b, 0.99), p.params());
  for (const auto& n : p.params().names(ad::Group::theta)) CHECK(is_zero(ge.at(n)));
  int nonzero = 0;
  for (const auto& n : p.params().names(ad::Group::phi)) nonzero += is_zero(ge.at(n)) ? 0 : 1;
  CHECK(nonzero == static_cast<int>(p.params().names(ad::Group::phi).size()));
  Tape td;
  const auto gd = td.backward(loss_decoder(td, p, b, reps, adv, 0.2), p.params());
  for (const auto& n : p.params().names(ad::Group::phi)) CHECK(is_zero(gd.at(n)));
  nonzero = 0;
  for (const auto& n : p.params().names(ad::Group::theta)) nonzero += is_zero(gd.at(n)) ? 0 : 1;
  CHECK(nonzero > 0);
}

TEST_CASE("optimizers") {
  TrainConfig c;
  c.learning_rate = 0.1;
  c.momentum = 0.5;
  ad::ParameterSet p;
  p.add("w", Tensor(1, 1, 1.0), ad::Group::phi);
  ad::Gradients g{{"w", Tensor(1, 1, 2.0)}};
  Optimizer sgd(c);
  sgd.step(p, g, {"w"});
  CHECK(p.at("w").item() == doctest::Approx(0.8));
  sgd.step(p, g, {"w"});  // velocity 0.5 * 2 + 2 = 3
  CHECK(p.at("w").item() == doctest::Approx(0.5));
  c.optimizer = OptimizerKind::adam;
  Optimizer adam(c);
  p.at("w")[0] = 1.0;
  adam.step(p, g, {"w"});  // first Adam step moves by lr * sign(g)
  CHECK(p.at("w").item() == doctest::Approx(0.9).epsilon(1e-6));
  ad::Gradients big{{"w", Tensor(1, 2, std::vector<double>{3.0, 4.0})}};
  CHECK(clip_gradients(big, {"w"}, 1.0) == 5.0);
  CHECK(big.at("w")[0] == doctest::Approx(0.6));
}

TEST_CASE("train: zero iterations leave the policy untouched") {
  const Setup s = toy();
  model::TdmatPolicy p(s.model, 10);
  TrainConfig c;
  c.iterations = 0;
  const TrainResult r = train::train(s.game, s.specs, p, c);
  CHECK(r.metrics.empty());
  for (const auto& n : p.params().names()) CHECK(r.policy.params().at(n) == p.params().at(n));
}

TEST_CASE("train is deterministic and thread-count independent") {
  const Setup s = toy(2, 4);
  TrainConfig c;
  c.iterations = 2;
  c.rollouts = 3;
  c.ppo_epochs = 2;
  c.seed = 42;
  auto run = [&](int threads) {
    c.threads = threads;
    return train::train(s.game, s.specs, model::TdmatPolicy(s.model, 42), c);
  };
  const TrainResult a = run(1), b = run(3);
  REQUIRE(a.metrics.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) CHECK(metrics_csv_row(a.metrics[k]) == metrics_csv_row(b.metrics[k]));
  CHECK(a.metrics[1].env_steps == 24);
  for (const auto& n : a.policy.params().names()) CHECK(a.policy.params().at(n) == b.policy.params().at(n));
}

TEST_CASE("non-finite losses abort with a snapshot") {
  const Setup s = toy(2, 3);
  model::TdmatPolicy p(s.model, 11);
  TrainConfig c;
  c.iterations = 3;
  c.rollouts = 1;
  c.learning_rate = 1e200;
  try {
    train::train(s.game, s.specs, p, c);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.snapshot().names() == p.params().names());
    CHECK(e.iteration() >= 0);
  }
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.clip = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.gae_lambda = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.rollouts = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
