#pragma once

// Rollout collection, GAE, the encoder/value and clipped decoder losses,
// and the alternating phi/theta update loop.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tdmat/autodiff.hpp"
#include "tdmat/error.hpp"
#include "tdmat/game.hpp"
#include "tdmat/model.hpp"

namespace tdmat::train {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  int iterations = 10;
  int rollouts = 8;  // D
  double learning_rate = 1e-3;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  int ppo_epochs = 4;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool normalize_advantages = true;
  double max_grad_norm = 0.0;  // 0 disables clipping
  int threads = 0;             // rollout workers; 0 means one per rollout
  bool random_order = false;   // per-episode random agent permutation
  bool batched = true;         // one time-causal pass per episode in the losses

  /// Throws ConfigError.
  void validate() const;
};

struct EpisodeBuffer {
  std::uint64_t seed = 0;
  std::vector<int> order;
  std::vector<game::WorldState> states;             // T + 1
  std::vector<game::ObservationSet> observations;   // T + 1
  std::vector<game::JointAction> actions;           // T
  std::vector<std::vector<double>> log_probs;       // T x N, frozen at collection
  std::vector<std::vector<double>> values;          // T x N
  std::vector<double> team_rewards;                 // T
  std::vector<std::vector<double>> agent_rewards;   // T x N
  stl::Trajectory trajectory;
  double robustness = 0.0;  // joint spec, full trajectory, t = 0
  bool satisfied = false;

  std::size_t steps() const noexcept { return actions.size(); }
  bool operator==(const EpisodeBuffer&) const = default;
};

struct RolloutBuffer {
  std::vector<EpisodeBuffer> episodes;
  bool operator==(const RolloutBuffer&) const = default;
};

struct RolloutOptions {
  int episodes = 1;
  int threads = 0;  // <= 1 runs sequentially
  bool random_order = false;
  bool greedy = false;
};

/// Seed of episode `d` in iteration `iteration`.
std::uint64_t episode_seed(std::uint64_t seed, int iteration, int episode);

/// Plays one episode from reset(seed), sampling from `policy`.
EpisodeBuffer collect_episode(const game::GameSpec& game, std::span<const stl::Spec> specs,
                              const model::TdmatPolicy& policy, std::uint64_t seed,
                              bool random_order = false, bool greedy = false);

/// Episode d uses seeds[d]. Results are stored by index, so the buffer does
/// not depend on the number of worker threads.
RolloutBuffer collect_rollouts(const game::GameSpec& game, std::span<const stl::Spec> specs,
                               const model::TdmatPolicy& policy,
                               std::span<const std::uint64_t> seeds, int threads,
                               bool random_order = false);

/// A_t = sum_l (gamma lambda)^l delta_{t+l}, delta_t = r_t + gamma V_{t+1} - V_t.
/// `values` has rewards.size() + 1 entries, the last one the bootstrap.
std::vector<double> compute_gae(std::span<const double> rewards, std::span<const double> values,
                                double gamma, double lambda);

/// Shared team advantage per episode and step, from buffered values with a
/// zero terminal bootstrap. Optionally normalised over the whole batch.
std::vector<std::vector<double>> compute_advantages(const RolloutBuffer& buffer, double gamma,
                                                    double lambda, bool normalize);

/// Values of every stored step (T x N) under the current parameters.
/// `batched` encodes the episode once; otherwise every prefix is
/// re-encoded separately. Both give identical numbers.
ad::Var episode_values(ad::Tape& tape, const model::TdmatPolicy& policy,
                       const EpisodeBuffer& episode, bool batched);

/// Encoder representations of every stored step (T * N x embed_dim),
/// computed without recording.
std::vector<ad::Tensor> encoder_snapshot(const model::TdmatPolicy& policy,
                                         const RolloutBuffer& buffer);

/// (1/N) sum_i sum_t [r_t + gamma V^i(t+1) - V^i(t)]^2 averaged over
/// episodes, with V(T) = 0. The target is detached, or taken from
/// `frozen_values` (per episode, T x N) when given.
ad::Var loss_encoder_value(ad::Tape& tape, const model::TdmatPolicy& policy,
                           const RolloutBuffer& buffer, double gamma, bool batched = true,
                           const std::vector<ad::Tensor>* frozen_values = nullptr);

/// -(1/N) sum_i sum_t min(r A, clip(r, 1 - eps, 1 + eps) A) averaged over
/// episodes. `reps` are the frozen encoder representations per episode.
ad::Var loss_decoder(ad::Tape& tape, const model::TdmatPolicy& policy, const RolloutBuffer& buffer,
                     std::span<const ad::Tensor> reps,
                     const std::vector<std::vector<double>>& advantages, double clip);

/// Log-probabilities of the stored actions (T x N) given frozen reps.
ad::Tensor recompute_log_probs(const model::TdmatPolicy& policy, const EpisodeBuffer& episode,
                               const ad::Tensor& reps);

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}
  /// Updates the parameters named in `names` from `grads`.
  void step(ad::ParameterSet& params, const ad::Gradients& grads,
            const std::vector<std::string>& names);

 private:
  TrainConfig config_;
  std::map<std::string, ad::Tensor> first_, second_;
  std::map<std::string, long> steps_;
};

/// Scales `grads` (restricted to `names`) to global norm <= max_norm.
/// Returns the norm before scaling.
double clip_gradients(ad::Gradients& grads, const std::vector<std::string>& names, double max_norm);

struct IterationMetrics {
  int iteration = 0;
  long env_steps = 0;  // cumulative
  double mean_robustness = 0.0;
  double satisfaction_rate = 0.0;
  double loss_enc_v = 0.0;  // mean over epochs
  double loss_dec = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const IterationMetrics& m);

/// Raised when a loss or gradient becomes non-finite; carries the parameters
/// from the start of the failing iteration.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int iteration, ad::ParameterSet snapshot)
      : Error(what), iteration_(iteration), snapshot_(std::move(snapshot)) {}
  int iteration() const noexcept { return iteration_; }
  const ad::ParameterSet& snapshot() const noexcept { return snapshot_; }

 private:
  int iteration_;
  ad::ParameterSet snapshot_;
};

using IterationHook = std::function<void(const IterationMetrics&, const model::TdmatPolicy&)>;

struct TrainResult {
  model::TdmatPolicy policy;
  std::vector<IterationMetrics> metrics;
};

/// N iterations of: D rollouts, ppo_epochs phi updates on the encoder/value
/// loss, then ppo_epochs theta updates on the decoder loss.
TrainResult train(const game::GameSpec& game, std::span<const stl::Spec> specs,
                  model::TdmatPolicy policy, const TrainConfig& config,
                  const IterationHook& hook = {});

}  // namespace tdmat::train
