#include "tdmat/game.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "tdmat/error.hpp"
#include "tdmat/random.hpp"

namespace tdmat::game {

const char* action_name(int action) {
  static constexpr const char* names[kNumActions] = {"UP", "DOWN", "LEFT", "RIGHT", "NOTHING"};
  if (action < 0 || action >= kNumActions) throw std::invalid_argument("invalid action id");
  return names[action];
}

void GameSpec::validate() const {
  if (n_agents < 1) throw std::invalid_argument("n_agents must be >= 1");
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0, 1]");
  if (!(dynamics.dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (!(dynamics.arena > 0.0)) throw std::invalid_argument("arena half-width must be positive");
  if (!(dynamics.damping >= 0.0 && dynamics.damping <= 1.0)) {
    throw std::invalid_argument("damping must be in [0, 1]");
  }
  if (!std::isfinite(dynamics.accel)) throw std::invalid_argument("accel must be finite");
}

int GameSpec::observation_width() const { return std::max(kObservationWidth, 4 * n_agents + 2); }

std::vector<Action> GameSpec::action_set(int agent) const {
  if (agent < 0 || agent >= n_agents) throw std::out_of_range("agent index");
  return {Action::up, Action::down, Action::left, Action::right, Action::nothing};
}

WorldState reset(const GameSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x5eedULL));
  const double r = spec.dynamics.arena;
  WorldState s;
  s.agent_pos.resize(spec.n_agents);
  s.agent_vel.assign(spec.n_agents, Vec2{0.0, 0.0});
  s.landmark_pos.resize(spec.n_agents);
  for (auto& p : s.agent_pos) p = {rng.uniform(-r, r), rng.uniform(-r, r)};
  for (auto& p : s.landmark_pos) p = {rng.uniform(-r, r), rng.uniform(-r, r)};
  s.step = 0;
  return s;
}

bool done(const GameSpec& spec, const WorldState& state) { return state.step >= spec.horizon; }

WorldState step(const GameSpec& spec, const WorldState& state, std::span<const int> actions) {
  if (done(spec, state)) throw std::logic_error("step on a finished episode");
  if (actions.size() != state.agent_pos.size()) {
    throw std::invalid_argument("expected one action per agent");
  }
  const Dynamics& d = spec.dynamics;
  WorldState next = state;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    Vec2 acc{0.0, 0.0};
    switch (actions[i]) {
      case static_cast<int>(Action::up): acc[1] = d.accel; break;
      case static_cast<int>(Action::down): acc[1] = -d.accel; break;
      case static_cast<int>(Action::left): acc[0] = -d.accel; break;
      case static_cast<int>(Action::right): acc[0] = d.accel; break;
      case static_cast<int>(Action::nothing): break;
      default: throw std::invalid_argument("invalid action id " + std::to_string(actions[i]));
    }
    for (int k = 0; k < 2; ++k) {
      double v = d.damping * state.agent_vel[i][k] + acc[k] * d.dt;
      double p = state.agent_pos[i][k] + v * d.dt;
      if (p > d.arena) {
        p = d.arena;
        v = 0.0;
      } else if (p < -d.arena) {
        p = -d.arena;
        v = 0.0;
      }
      next.agent_vel[i][k] = v;
      next.agent_pos[i][k] = p;
    }
  }
  next.step = state.step + 1;
  return next;
}

ObservationSet observe(const GameSpec& spec, const WorldState& state) {
  const int n = static_cast<int>(state.agent_pos.size());
  ObservationSet obs(n, std::vector<double>(spec.observation_width(), 0.0));
  for (int i = 0; i < n; ++i) {
    auto& o = obs[i];
    const Vec2& p = state.agent_pos[i];
    std::size_t k = 0;
    o[k++] = state.agent_vel[i][0];
    o[k++] = state.agent_vel[i][1];
    o[k++] = p[0];
    o[k++] = p[1];
    for (const Vec2& l : state.landmark_pos) {
      o[k++] = l[0] - p[0];
      o[k++] = l[1] - p[1];
    }
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      o[k++] = state.agent_pos[j][0] - p[0];
      o[k++] = state.agent_pos[j][1] - p[1];
    }
  }
  return obs;
}

std::string agent_name(int i) { return "agent" + std::to_string(i); }
std::string landmark_name(int j) { return "landmark" + std::to_string(j); }

std::vector<std::string> entity_names(int n_agents) {
  std::vector<std::string> names;
  for (int i = 0; i < n_agents; ++i) names.push_back(agent_name(i));
  for (int j = 0; j < n_agents; ++j) names.push_back(landmark_name(j));
  return names;
}

std::vector<Vec2> entity_positions(const WorldState& state) {
  std::vector<Vec2> out = state.agent_pos;
  out.insert(out.end(), state.landmark_pos.begin(), state.landmark_pos.end());
  return out;
}

stl::Spec near(int agent, int landmark, double radius) {
  return stl::make_distance(agent_name(agent), landmark_name(landmark), radius);
}

std::vector<stl::Spec> build_task_1(int n_agents, int window, double radius) {
  if (n_agents < 1) throw std::invalid_argument("n_agents must be >= 1");
  std::vector<stl::Spec> specs;
  for (int k = 0; k < n_agents; ++k) {
    const int next = (k + 1) % n_agents;
    specs.push_back(stl::both(stl::eventually(0, window, near(k, k, radius)),
                              stl::eventually(0, window, near(k, next, radius))));
  }
  return specs;
}

std::vector<stl::Spec> build_task_2(int n_agents, int window, double radius) {
  if (n_agents < 1) throw std::invalid_argument("n_agents must be >= 1");
  std::vector<stl::Spec> meet;
  for (int k = 0; k < n_agents; ++k) meet.push_back(near(k, 0, radius));
  const stl::Spec rendezvous = stl::eventually(0, window, stl::conjoin(meet));
  std::vector<stl::Spec> specs;
  for (int i = 0; i < n_agents; ++i) {
    specs.push_back(stl::both(rendezvous, stl::eventually(0, window, near(i, i, radius))));
  }
  return specs;
}

std::vector<stl::Spec> build_reach_task(int n_agents, int window, double radius) {
  if (n_agents < 1) throw std::invalid_argument("n_agents must be >= 1");
  std::vector<stl::Spec> specs;
  for (int i = 0; i < n_agents; ++i) specs.push_back(stl::eventually(0, window, near(i, i, radius)));
  return specs;
}

StepReward reward(const stl::TraceView& prefix, std::span<const stl::Spec> specs, double floor) {
  StepReward r;
  r.agents.reserve(specs.size());
  for (const auto& s : specs) r.agents.push_back(stl::prefix_robustness(s, prefix, floor));
  r.team = stl::prefix_robustness(stl::conjoin(specs), prefix, floor);
  return r;
}

EpisodeRecord play_episode(const GameSpec& spec, std::span<const stl::Spec> specs,
                           std::uint64_t seed, const ActionFn& act) {
  if (static_cast<int>(specs.size()) != spec.n_agents) {
    throw std::invalid_argument("expected one specification per agent");
  }
  EpisodeRecord rec;
  rec.trajectory = stl::Trajectory(entity_names(spec.n_agents));
  WorldState s = reset(spec, seed);
  rec.states.push_back(s);
  rec.trajectory.push_state(entity_positions(s));
  rec.observations.push_back(observe(spec, s));
  StepReward previous = reward(stl::TraceView(rec.trajectory, 1), specs, spec.robustness_floor);
  while (!done(spec, s)) {
    JointAction a = act(rec.observations, s);
    s = step(spec, s, a);
    rec.actions.push_back(std::move(a));
    rec.states.push_back(s);
    rec.trajectory.push_state(entity_positions(s));
    rec.observations.push_back(observe(spec, s));
    StepReward r =
        reward(stl::TraceView(rec.trajectory, rec.trajectory.size()), specs, spec.robustness_floor);
    if (spec.reward_mode == RewardMode::increment) {
      StepReward inc = r;
      for (std::size_t i = 0; i < inc.agents.size(); ++i) inc.agents[i] -= previous.agents[i];
      inc.team -= previous.team;
      previous = std::move(r);
      r = std::move(inc);
    }
    rec.agent_rewards.push_back(r.agents);
    rec.team_rewards.push_back(r.team);
  }
  return rec;
}

void write_episode_jsonl(const EpisodeRecord& record, std::ostream& out) {
  using nlohmann::ordered_json;
  const auto& names = record.trajectory.entity_names();
  for (std::size_t t = 0; t < record.trajectory.size(); ++t) {
    ordered_json line;
    line["t"] = t;
    ordered_json entities = ordered_json::object();
    for (std::size_t e = 0; e < names.size(); ++e) {
      const Vec2& p = record.trajectory.position(t, e);
      entities[names[e]] = {p[0], p[1]};
    }
    line["entities"] = std::move(entities);
    line["obs"] = record.observations.at(t);
    if (t < record.actions.size()) {
      line["actions"] = record.actions[t];
      line["rewards"] = record.agent_rewards[t];
      line["team_reward"] = record.team_rewards[t];
    } else {
      line["actions"] = ordered_json::array();
      line["rewards"] = ordered_json::array();
      line["team_reward"] = nullptr;
    }
    out << line.dump() << '\n';
  }
}

stl::Trajectory read_trace_jsonl(std::istream& in) {
  using nlohmann::ordered_json;
  stl::Trajectory trace;
  std::vector<std::string> names;
  std::string text;
  std::size_t line_no = 0;
  std::size_t expected_t = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json line;
    try {
      line = ordered_json::parse(text);
    } catch (const ordered_json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!line.contains("t") || !line["t"].is_number_integer()) {
      throw ParseError("missing integer field 't'", line_no);
    }
    if (line["t"].get<std::size_t>() != expected_t) {
      throw ParseError("time indices must be contiguous from 0", line_no);
    }
    if (!line.contains("entities") || !line["entities"].is_object()) {
      throw ParseError("missing object field 'entities'", line_no);
    }
    const auto& ents = line["entities"];
    if (expected_t == 0) {
      for (auto it = ents.begin(); it != ents.end(); ++it) names.push_back(it.key());
      trace = stl::Trajectory(names);
    }
    if (ents.size() != names.size()) throw ParseError("entity set changed", line_no);
    std::vector<Vec2> pos;
    for (const auto& name : names) {
      if (!ents.contains(name)) throw ParseError("entity '" + name + "' missing", line_no);
      const auto& p = ents[name];
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        throw ParseError("entity '" + name + "' must be [x, y]", line_no);
      }
      pos.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    trace.push_state(std::move(pos));
    ++expected_t;
  }
  if (trace.empty()) throw ParseError("trace has no states", line_no);
  return trace;
}

}  // namespace tdmat::game
