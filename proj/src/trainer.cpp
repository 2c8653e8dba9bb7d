#include "tdmat/trainer.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <thread>

#include "tdmat/random.hpp"

namespace tdmat::train {

using ad::Tape;
using ad::Tensor;
using ad::Var;

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (rollouts < 1) throw ConfigError("rollouts (D) must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("gae_lambda must be in [0, 1]");
  if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("clip must be in (0, 1)");
  if (ppo_epochs < 1) throw ConfigError("ppo_epochs must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be >= 0");
  if (threads < 0) throw ConfigError("threads must be >= 0");
}

std::uint64_t episode_seed(std::uint64_t seed, int iteration, int episode) {
  return derive_seed(seed, static_cast<std::uint64_t>(iteration),
                     static_cast<std::uint64_t>(episode));
}

EpisodeBuffer collect_episode(const game::GameSpec& game, std::span<const stl::Spec> specs,
                              const model::TdmatPolicy& policy, std::uint64_t seed,
                              bool random_order, bool greedy) {
  const int n = game.n_agents;
  if (policy.config().n_agents != n) throw ConfigError("policy and game disagree on n_agents");
  Rng rng(derive_seed(seed, 0xac7ULL));
  EpisodeBuffer ep;
  ep.seed = seed;
  ep.order = model::identity_order(n);
  if (random_order) {
    for (int k = n - 1; k > 0; --k) std::swap(ep.order[k], ep.order[rng.below(k + 1)]);
  }
  auto act = [&](const std::vector<game::ObservationSet>& history, const game::WorldState&) {
    model::JointSample s = model::sample_joint_action(policy, history, ep.order, rng, greedy);
    ep.log_probs.push_back(std::move(s.log_probs));
    ep.values.push_back(std::move(s.values));
    return s.actions;
  };
  game::EpisodeRecord rec = game::play_episode(game, specs, seed, act);
  ep.states = std::move(rec.states);
  ep.observations = std::move(rec.observations);
  ep.actions = std::move(rec.actions);
  ep.team_rewards = std::move(rec.team_rewards);
  ep.agent_rewards = std::move(rec.agent_rewards);
  ep.trajectory = std::move(rec.trajectory);
  ep.robustness = stl::robustness(stl::conjoin(specs), stl::TraceView(ep.trajectory), 0);
  ep.satisfied = ep.robustness > 0.0;
  return ep;
}

RolloutBuffer collect_rollouts(const game::GameSpec& game, std::span<const stl::Spec> specs,
                               const model::TdmatPolicy& policy,
                               std::span<const std::uint64_t> seeds, int threads,
                               bool random_order) {
  const std::size_t d = seeds.size();
  RolloutBuffer buffer;
  buffer.episodes.resize(d);
  std::vector<std::exception_ptr> errors(d);
  auto run = [&](std::size_t k) {
    try {
      buffer.episodes[k] = collect_episode(game, specs, policy, seeds[k], random_order);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(threads > 1 ? threads : 1, d);
  if (workers <= 1) {
    for (std::size_t k = 0; k < d; ++k) run(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < d; k += workers) run(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (std::size_t k = 0; k < d; ++k) {
    if (!errors[k]) continue;
    try {
      std::rethrow_exception(errors[k]);
    } catch (const NumericError& e) {
      throw NumericError("rollout episode " + std::to_string(k) + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error("rollout episode " + std::to_string(k) + ": " + e.what());
    }
  }
  return buffer;
}

std::vector<double> compute_gae(std::span<const double> rewards, std::span<const double> values,
                                double gamma, double lambda) {
  if (values.size() != rewards.size() + 1) {
    throw std::invalid_argument("compute_gae: expected " + std::to_string(rewards.size() + 1) +
                                " values, got " + std::to_string(values.size()));
  }
  std::vector<double> adv(rewards.size(), 0.0);
  double running = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const double delta = rewards[t] + gamma * values[t + 1] - values[t];
    running = delta + gamma * lambda * running;
    adv[t] = running;
  }
  return adv;
}

std::vector<std::vector<double>> compute_advantages(const RolloutBuffer& buffer, double gamma,
                                                    double lambda, bool normalize) {
  std::vector<std::vector<double>> out;
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& ep : buffer.episodes) {
    std::vector<double> v;
    for (const auto& row : ep.values) v.push_back(model::robust_value(row));
    v.push_back(0.0);
    out.push_back(compute_gae(ep.team_rewards, v, gamma, lambda));
    for (double a : out.back()) sum += a;
    count += out.back().size();
  }
  if (normalize && count > 1) {
    const double mean = sum / static_cast<double>(count);
    double var = 0.0;
    for (const auto& a : out) {
      for (double x : a) var += (x - mean) * (x - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(count));
    for (auto& a : out) {
      for (double& x : a) x = (x - mean) / (sd + 1e-8);
    }
  }
  return out;
}

namespace {

std::span<const game::ObservationSet> stored_steps(const EpisodeBuffer& ep) {
  return std::span<const game::ObservationSet>(ep.observations).first(ep.steps());
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
  Tensor t(rows.size(), rows.empty() ? 0 : rows.front().size(), 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) t(r, c) = rows[r][c];
  }
  return t;
}

bool all_finite(const ad::Gradients& grads) {
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace

Var episode_values(Tape& tape, const model::TdmatPolicy& policy, const EpisodeBuffer& ep,
                   bool batched) {
  const auto steps = stored_steps(ep);
  if (batched) {
    const model::TokenBatch tokens = model::encode_history(tape, policy, steps);
    return model::value_forward_all(tape, policy, model::encoder_forward(tape, policy, tokens));
  }
  const std::size_t n = static_cast<std::size_t>(policy.config().n_agents);
  std::vector<Var> rows;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const model::TokenBatch tokens = model::encode_history(tape, policy, steps.first(t + 1));
    const model::EncoderOutput enc = model::encoder_forward(tape, policy, tokens);
    rows.push_back(ad::reshape(model::value_forward(tape, policy, enc, static_cast<int>(t)), 1, n));
  }
  return rows.size() == 1 ? rows.front() : ad::concat_rows(rows);
}

std::vector<Tensor> encoder_snapshot(const model::TdmatPolicy& policy, const RolloutBuffer& buffer) {
  std::vector<Tensor> out;
  for (const auto& ep : buffer.episodes) {
    Tape tape(false);
    const model::TokenBatch tokens = model::encode_history(tape, policy, stored_steps(ep));
    out.push_back(model::encoder_forward(tape, policy, tokens).rep.value());
  }
  return out;
}

Var loss_encoder_value(Tape& tape, const model::TdmatPolicy& policy, const RolloutBuffer& buffer,
                       double gamma, bool batched, const std::vector<Tensor>* frozen_values) {
  if (buffer.episodes.empty()) throw std::invalid_argument("empty rollout buffer");
  const double n = static_cast<double>(policy.config().n_agents);
  Var total;
  for (std::size_t e = 0; e < buffer.episodes.size(); ++e) {
    const EpisodeBuffer& ep = buffer.episodes[e];
    Var v = episode_values(tape, policy, ep, batched);
    const Tensor& current = frozen_values ? frozen_values->at(e) : v.value();
    const std::size_t steps = ep.steps();
    Tensor target(steps, current.cols(), 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t i = 0; i < current.cols(); ++i) {
        const double next = t + 1 < steps ? current(t + 1, i) : 0.0;
        target(t, i) = ep.team_rewards[t] + gamma * next;
      }
    }
    Var l = ad::scale(ad::sum(ad::square(ad::sub(tape.constant(std::move(target)), v))), 1.0 / n);
    total = e == 0 ? l : ad::add(total, l);
  }
  return ad::scale(total, 1.0 / static_cast<double>(buffer.episodes.size()));
}

Var loss_decoder(Tape& tape, const model::TdmatPolicy& policy, const RolloutBuffer& buffer,
                 std::span<const Tensor> reps, const std::vector<std::vector<double>>& advantages,
                 double clip) {
  if (buffer.episodes.empty()) throw std::invalid_argument("empty rollout buffer");
  if (reps.size() != buffer.episodes.size() || advantages.size() != buffer.episodes.size()) {
    throw std::invalid_argument("loss_decoder: one rep tensor and advantage row per episode");
  }
  const std::size_t n = static_cast<std::size_t>(policy.config().n_agents);
  Var total;
  for (std::size_t e = 0; e < buffer.episodes.size(); ++e) {
    const EpisodeBuffer& ep = buffer.episodes[e];
    Var logp = model::log_prob_all(tape, policy, tape.constant(reps[e]), ep.actions, ep.order);
    Var ratio = ad::exp(ad::sub(logp, tape.constant(rows_to_tensor(ep.log_probs))));
    Tensor adv(ep.steps(), n, 0.0);
    for (std::size_t t = 0; t < ep.steps(); ++t) {
      for (std::size_t i = 0; i < n; ++i) adv(t, i) = advantages[e].at(t);
    }
    Var a = tape.constant(std::move(adv));
    Var surrogate = ad::minimum(ad::mul(ratio, a), ad::mul(ad::clamp(ratio, 1.0 - clip, 1.0 + clip), a));
    Var l = ad::scale(ad::sum(surrogate), -1.0 / static_cast<double>(n));
    total = e == 0 ? l : ad::add(total, l);
  }
  return ad::scale(total, 1.0 / static_cast<double>(buffer.episodes.size()));
}

Tensor recompute_log_probs(const model::TdmatPolicy& policy, const EpisodeBuffer& ep,
                           const Tensor& reps) {
  Tape tape(false);
  return model::log_prob_all(tape, policy, tape.constant(reps), ep.actions, ep.order).value();
}

void Optimizer::step(ad::ParameterSet& params, const ad::Gradients& grads,
                     const std::vector<std::string>& names) {
  const double lr = config_.learning_rate;
  for (const auto& name : names) {
    const Tensor& g = grads.at(name);
    Tensor& p = params.at(name);
    auto [m_it, m_new] = first_.try_emplace(name, Tensor(p.shape(), 0.0));
    Tensor& m = m_it->second;
    if (config_.optimizer == OptimizerKind::sgd) {
      for (std::size_t k = 0; k < p.numel(); ++k) {
        m[k] = config_.momentum * m[k] + g[k];
        p[k] -= lr * m[k];
      }
      continue;
    }
    Tensor& v = second_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
    const long t = ++steps_[name];
    const double c1 = 1.0 - std::pow(config_.adam_beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(config_.adam_beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < p.numel(); ++k) {
      m[k] = config_.adam_beta1 * m[k] + (1.0 - config_.adam_beta1) * g[k];
      v[k] = config_.adam_beta2 * v[k] + (1.0 - config_.adam_beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.adam_eps);
    }
  }
}

double clip_gradients(ad::Gradients& grads, const std::vector<std::string>& names, double max_norm) {
  double sq = 0.0;
  for (const auto& name : names) {
    for (double v : grads.at(name).data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& name : names) {
      for (double& v : grads.at(name).data()) v *= s;
    }
  }
  return norm;
}

std::string metrics_csv_header() {
  return "iteration,env_steps,mean_robustness,satisfaction_rate,loss_enc_v,loss_dec";
}

std::string metrics_csv_row(const IterationMetrics& m) {
  std::string row = std::to_string(m.iteration) + ',' + std::to_string(m.env_steps);
  for (double v : {m.mean_robustness, m.satisfaction_rate, m.loss_enc_v, m.loss_dec}) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    row += ',';
    row.append(buf, r.ptr);
  }
  return row;
}

TrainResult train(const game::GameSpec& game, std::span<const stl::Spec> specs,
                  model::TdmatPolicy policy, const TrainConfig& config, const IterationHook& hook) {
  config.validate();
  game.validate();
  const model::ModelConfig& mc = policy.config();
  if (mc.n_agents != game.n_agents) throw ConfigError("model n_agents differs from the game");
  if (mc.obs_dim != game.observation_width()) throw ConfigError("model obs_dim differs from the game");
  if (mc.horizon < game.horizon) throw ConfigError("model horizon shorter than the episode");
  if (static_cast<int>(specs.size()) != game.n_agents) {
    throw ConfigError("expected one specification per agent");
  }

  ad::ParameterSet& params = policy.params();
  const auto phi = params.names(ad::Group::phi);
  const auto theta = params.names(ad::Group::theta);
  Optimizer opt_phi(config), opt_theta(config);
  const int workers = config.threads == 0 ? config.rollouts : config.threads;

  std::vector<IterationMetrics> metrics;
  long env_steps = 0;
  for (int it = 0; it < config.iterations; ++it) {
    const ad::ParameterSet snapshot = params;
    IterationMetrics m;
    m.iteration = it;
    try {
      std::vector<std::uint64_t> seeds;
      for (int d = 0; d < config.rollouts; ++d) seeds.push_back(episode_seed(config.seed, it, d));
      const RolloutBuffer buffer =
          collect_rollouts(game, specs, policy, seeds, workers, config.random_order);
      env_steps += static_cast<long>(config.rollouts) * game.horizon;
      const auto advantages =
          compute_advantages(buffer, config.gamma, config.gae_lambda, config.normalize_advantages);
      const std::vector<Tensor> reps = encoder_snapshot(policy, buffer);

      auto update = [&](const auto& build, const std::vector<std::string>& names, Optimizer& opt,
                        const char* what) {
        double total = 0.0;
        for (int epoch = 0; epoch < config.ppo_epochs; ++epoch) {
          Tape tape;
          Var loss = build(tape);
          const double value = loss.value().item();
          if (!std::isfinite(value)) throw NumericError(std::string(what) + " is not finite");
          ad::Gradients grads = tape.backward(loss, params);
          if (!all_finite(grads)) throw NumericError(std::string(what) + " gradient is not finite");
          clip_gradients(grads, names, config.max_grad_norm);
          opt.step(params, grads, names);
          total += value;
        }
        return total / config.ppo_epochs;
      };
      m.loss_enc_v = update(
          [&](Tape& tape) {
            return loss_encoder_value(tape, policy, buffer, config.gamma, config.batched);
          },
          phi, opt_phi, "encoder/value loss");
      m.loss_dec = update(
          [&](Tape& tape) {
            return loss_decoder(tape, policy, buffer, reps, advantages, config.clip);
          },
          theta, opt_theta, "decoder loss");

      double rob = 0.0;
      int sat = 0;
      for (const auto& ep : buffer.episodes) {
        rob += ep.robustness;
        sat += ep.satisfied ? 1 : 0;
      }
      m.env_steps = env_steps;
      m.mean_robustness = rob / buffer.episodes.size();
      m.satisfaction_rate = static_cast<double>(sat) / buffer.episodes.size();
    } catch (const NumericError& e) {
      throw TrainingError("iteration " + std::to_string(it) + ": " + e.what(), it, snapshot);
    }
    metrics.push_back(m);
    if (hook) hook(m, policy);
  }
  return TrainResult{std::move(policy), std::move(metrics)};
}

}  // namespace tdmat::train
