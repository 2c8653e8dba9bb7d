#pragma once

// Landmark world: a 2-D particle Markov game whose rewards are prefix
// robustness values of per-agent STL specifications.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tdmat/stl.hpp"

namespace tdmat::game {

using stl::Vec2;

enum class Action : int { up = 0, down = 1, left = 2, right = 3, nothing = 4 };
inline constexpr int kNumActions = 5;
const char* action_name(int action);

/// Width of every per-agent observation vector for teams of up to 4 agents.
inline constexpr int kObservationWidth = 18;

struct Dynamics {
  double dt = 0.1;
  double accel = 3.0;
  double damping = 0.75;
  double arena = 1.0;  // positions clamped to [-arena, arena]^2
};

enum class RewardMode { literal, increment };

struct GameSpec {
  int n_agents = 3;
  int horizon = 25;
  double gamma = 0.99;
  Dynamics dynamics{};
  RewardMode reward_mode = RewardMode::literal;
  double robustness_floor = stl::kDefaultRobustnessFloor;

  /// Throws std::invalid_argument on violated invariants.
  void validate() const;
  int observation_width() const;
  /// A_i; identical for every agent.
  std::vector<Action> action_set(int agent) const;
};

struct WorldState {
  std::vector<Vec2> agent_pos;
  std::vector<Vec2> agent_vel;
  std::vector<Vec2> landmark_pos;
  int step = 0;

  bool operator==(const WorldState&) const = default;
};

/// One row per agent, each `observation_width()` long.
using ObservationSet = std::vector<std::vector<double>>;
using JointAction = std::vector<int>;

WorldState reset(const GameSpec& spec, std::uint64_t seed);
/// Throws std::invalid_argument on a bad action id and std::logic_error
/// when the episode is already finished.
WorldState step(const GameSpec& spec, const WorldState& state, std::span<const int> actions);
bool done(const GameSpec& spec, const WorldState& state);

/// Per-agent layout: [vel(2), pos(2), landmark_k - pos (2 per landmark),
/// other agent - pos (2 per other agent, ascending index), zeros].
ObservationSet observe(const GameSpec& spec, const WorldState& state);

std::string agent_name(int i);
std::string landmark_name(int j);
std::vector<std::string> entity_names(int n_agents);
std::vector<Vec2> entity_positions(const WorldState& state);

inline constexpr double kLandmarkRadius = 0.3;

/// psi_{i,j}: agent i within `radius` of landmark j.
stl::Spec near(int agent, int landmark, double radius = kLandmarkRadius);

/// Visit own landmark and the next one: F[0,w] psi_{i,i} and F[0,w] psi_{i,(i+1) mod N}.
std::vector<stl::Spec> build_task_1(int n_agents, int window = 25,
                                    double radius = kLandmarkRadius);
/// Everyone meets at the first landmark at some step, and each agent visits
/// its own landmark: F[0,w](and_k psi_{k,0}) and F[0,w] psi_{i,i}.
std::vector<stl::Spec> build_task_2(int n_agents, int window = 25,
                                    double radius = kLandmarkRadius);
/// Single-landmark reach task F[0,w] psi_{i,i}.
std::vector<stl::Spec> build_reach_task(int n_agents, int window,
                                        double radius = kLandmarkRadius);

struct StepReward {
  std::vector<double> agents;
  double team = 0.0;
};

/// Per-agent prefix robustness and the robustness of their conjunction.
StepReward reward(const stl::TraceView& prefix, std::span<const stl::Spec> specs,
                  double floor = stl::kDefaultRobustnessFloor);

struct EpisodeRecord {
  stl::Trajectory trajectory;               // T + 1 states
  std::vector<ObservationSet> observations;  // T + 1
  std::vector<JointAction> actions;          // T
  std::vector<std::vector<double>> agent_rewards;
  std::vector<double> team_rewards;
  std::vector<WorldState> states;  // T + 1
};

/// Picks a joint action given the observation history o_{0:t} and the
/// current state.
using ActionFn =
    std::function<JointAction(const std::vector<ObservationSet>& history, const WorldState& state)>;

/// Runs one full episode from reset(seed). Rewards follow `spec.reward_mode`.
EpisodeRecord play_episode(const GameSpec& spec, std::span<const stl::Spec> specs,
                           std::uint64_t seed, const ActionFn& act);

/// JSON Lines, one object per time step:
///   {"t", "entities": {name: [x, y]}, "obs", "actions", "rewards", "team_reward"}
/// The last line (t = T) carries empty actions/rewards.
void write_episode_jsonl(const EpisodeRecord& record, std::ostream& out);
/// Reads `t` and `entities` from each line; other fields are ignored.
stl::Trajectory read_trace_jsonl(std::istream& in);

}  // namespace tdmat::game
