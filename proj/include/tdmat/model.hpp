#pragma once

// Time- and agent-encoded multi-agent transformer policy.
//
// Tokens are ordered time-major: token index = t * n_agents + agent.
// The encoder is time-causal (token (i, t') sees (j, t'') iff t'' <= t'),
// the value decoder emits one value per agent for the current step, and
// the action decoder is autoregressive over a fixed agent ordering.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tdmat/autodiff.hpp"
#include "tdmat/game.hpp"
#include "tdmat/random.hpp"

namespace tdmat::model {

struct ModelConfig {
  int obs_dim = game::kObservationWidth;
  int embed_dim = 64;
  int n_heads = 4;
  int n_encoder_blocks = 2;
  int n_value_blocks = 1;
  int n_decoder_blocks = 2;
  int n_actions = game::kNumActions;
  int n_agents = 3;
  int horizon = 25;
  int ffn_multiplier = 2;

  /// Throws std::invalid_argument. embed_dim must split evenly into heads
  /// and into two sinusoid halves of even width.
  void validate() const;
  /// Stable "key=value;..." summary stored in checkpoints.
  std::string fingerprint() const;
  bool operator==(const ModelConfig&) const = default;
};

class TdmatPolicy {
 public:
  /// Freshly initialised parameters.
  TdmatPolicy(ModelConfig config, std::uint64_t seed);
  /// Adopts existing parameters; throws CheckpointError when names or
  /// shapes disagree with `config`.
  TdmatPolicy(ModelConfig config, ad::ParameterSet params);

  const ModelConfig& config() const noexcept { return config_; }
  ad::ParameterSet& params() noexcept { return params_; }
  const ad::ParameterSet& params() const noexcept { return params_; }

 private:
  ModelConfig config_;
  ad::ParameterSet params_;
};

/// Parameter-free positional term: sinusoid of `time` in the first half of
/// the embedding, sinusoid of `agent` in the second half. Within each half
/// coordinate 2k is sin(pos / 10000^(2k/h)) and 2k+1 the matching cos.
std::vector<double> positional_term(int time, int agent, int embed_dim);

struct TokenBatch {
  ad::Var tokens;  // M x embed_dim
  std::vector<int> agent_ids;
  std::vector<int> time_ids;
};

/// tokens = observations * W + b + positional_term(time, agent).
/// `observations` is M x obs_dim. Throws std::out_of_range for bad ids.
TokenBatch encode_positions(ad::Tape& tape, const TdmatPolicy& policy,
                            const ad::Tensor& observations, std::span<const int> agent_ids,
                            std::span<const int> time_ids);

/// All tokens of o_{0:t} for t = history.size() - 1, time-major.
TokenBatch encode_history(ad::Tape& tape, const TdmatPolicy& policy,
                          std::span<const game::ObservationSet> history);

/// Single-head softmax(q k^T / sqrt(d_k)) v with a visibility mask.
ad::Var scaled_dot_attention(ad::Var q, ad::Var k, ad::Var v, const ad::Mask& mask);

/// Multi-head attention using parameters `<prefix>.{wq,wk,wv,wo,bo}`.
ad::Var attention(ad::Tape& tape, const TdmatPolicy& policy, const std::string& prefix,
                  ad::Var query_in, ad::Var kv_in, const ad::Mask& mask);

struct EncoderOutput {
  ad::Var rep;  // same shape as the input tokens
  std::vector<int> agent_ids;
  std::vector<int> time_ids;
};

EncoderOutput encoder_forward(ad::Tape& tape, const TdmatPolicy& policy, const TokenBatch& tokens);

/// Values V^i(o_{0:t}) for the n_agents tokens at time t; (n_agents x 1).
/// Reads only encoder rows with time <= t.
ad::Var value_forward(ad::Tape& tape, const TdmatPolicy& policy, const EncoderOutput& enc, int t);

/// Values for every time step present in `enc`, as (steps x n_agents).
ad::Var value_forward_all(ad::Tape& tape, const TdmatPolicy& policy, const EncoderOutput& enc);

/// Mean of the per-agent values, the team baseline used for advantages.
double robust_value(std::span<const double> agent_values);

/// Ascending agent order.
std::vector<int> identity_order(int n_agents);

/// Action distribution (1 x n_actions) for agent `order[prior.size()]`
/// given the actions `prior` already chosen by `order[0..)`.
/// `current` is the encoder representation of the current step, one row
/// per agent in ascending id order (n_agents x embed_dim).
ad::Var decode_actions(ad::Tape& tape, const TdmatPolicy& policy, ad::Var current,
                       std::span<const int> prior, std::span<const int> order);

/// Batched decoder over many steps: action distributions
/// (steps * n_agents x n_actions), row s * n_agents + i for agent i at step s.
/// `reps` and `actions` as in log_prob_all.
ad::Var action_distributions(ad::Tape& tape, const TdmatPolicy& policy, ad::Var reps,
                             std::span<const game::JointAction> actions, std::span<const int> order);

/// Batched decoder over many steps. `reps` holds steps * n_agents encoder
/// rows (time-major, ascending agent id), `actions[s][agent]` the joint
/// action taken at step s. Returns (steps x n_agents) log-probabilities of
/// the taken actions, columns indexed by agent id.
ad::Var log_prob_all(ad::Tape& tape, const TdmatPolicy& policy, ad::Var reps,
                     std::span<const game::JointAction> actions, std::span<const int> order);

struct JointSample {
  game::JointAction actions;
  std::vector<double> log_probs;  // by agent id
  std::vector<double> values;     // by agent id
  std::vector<std::vector<double>> probs;
};

/// Encode o_{0:t}, evaluate values, then decode and draw agents one at a
/// time in `order`. `greedy` takes the argmax (lowest id on ties).
JointSample sample_joint_action(const TdmatPolicy& policy,
                                std::span<const game::ObservationSet> history,
                                std::span<const int> order, Rng& rng, bool greedy);

}  // namespace tdmat::model
