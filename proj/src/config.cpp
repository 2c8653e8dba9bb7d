#include "tdmat/config.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "tdmat/error.hpp"

namespace tdmat::config {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Shortest text that reads back to the same double.
std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(name, member) \
  {name, {[](RunConfig& c, const std::string& v) { c.member = parse_integer<decltype(c.member)>(name, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); }}}
#define REAL_FIELD(name, member) \
  {name, {[](RunConfig& c, const std::string& v) { c.member = parse_real(name, v); }, \
          [](const RunConfig& c) { return format_double(c.member); }}}
#define FLAG_FIELD(name, member) \
  {name, {[](RunConfig& c, const std::string& v) { c.member = parse_flag(name, v); }, \
          [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}}
#define TEXT_FIELD(name, member) \
  {name, {[](RunConfig& c, const std::string& v) { c.member = v; }, \
          [](const RunConfig& c) { return c.member; }}}

// Output order of format_run_config.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      INT_FIELD("n_agents", game.n_agents),
      INT_FIELD("horizon", game.horizon),
      REAL_FIELD("gamma", game.gamma),
      REAL_FIELD("radius", radius),
      REAL_FIELD("dt", game.dynamics.dt),
      REAL_FIELD("accel", game.dynamics.accel),
      REAL_FIELD("damping", game.dynamics.damping),
      REAL_FIELD("arena", game.dynamics.arena),
      {"reward_mode",
       {[](RunConfig& c, const std::string& v) {
          if (v == "literal") {
            c.game.reward_mode = game::RewardMode::literal;
          } else if (v == "increment") {
            c.game.reward_mode = game::RewardMode::increment;
          } else {
            throw ConfigError("reward_mode: expected literal or increment, got '" + v + "'");
          }
        },
        [](const RunConfig& c) {
          return std::string(c.game.reward_mode == game::RewardMode::literal ? "literal"
                                                                              : "increment");
        }}},
      REAL_FIELD("robustness_floor", game.robustness_floor),
      TEXT_FIELD("task", task),
      TEXT_FIELD("spec_file", spec_file),
      INT_FIELD("embed_dim", model.embed_dim),
      INT_FIELD("n_heads", model.n_heads),
      INT_FIELD("n_encoder_blocks", model.n_encoder_blocks),
      INT_FIELD("n_value_blocks", model.n_value_blocks),
      INT_FIELD("n_decoder_blocks", model.n_decoder_blocks),
      INT_FIELD("ffn_multiplier", model.ffn_multiplier),
      INT_FIELD("iterations", train.iterations),
      INT_FIELD("rollouts", train.rollouts),
      REAL_FIELD("learning_rate", train.learning_rate),
      REAL_FIELD("gae_lambda", train.gae_lambda),
      REAL_FIELD("clip", train.clip),
      INT_FIELD("ppo_epochs", train.ppo_epochs),
      {"optimizer",
       {[](RunConfig& c, const std::string& v) {
          if (v == "sgd") {
            c.train.optimizer = train::OptimizerKind::sgd;
          } else if (v == "adam") {
            c.train.optimizer = train::OptimizerKind::adam;
          } else {
            throw ConfigError("optimizer: expected sgd or adam, got '" + v + "'");
          }
        },
        [](const RunConfig& c) {
          return std::string(c.train.optimizer == train::OptimizerKind::sgd ? "sgd" : "adam");
        }}},
      REAL_FIELD("momentum", train.momentum),
      REAL_FIELD("adam_beta1", train.adam_beta1),
      REAL_FIELD("adam_beta2", train.adam_beta2),
      REAL_FIELD("adam_eps", train.adam_eps),
      FLAG_FIELD("normalize_advantages", train.normalize_advantages),
      REAL_FIELD("max_grad_norm", train.max_grad_norm),
      INT_FIELD("threads", train.threads),
      FLAG_FIELD("random_order", train.random_order),
      FLAG_FIELD("batched", train.batched),
      INT_FIELD("checkpoint_every", checkpoint_every),
      INT_FIELD("verify_n", verify_n),
      REAL_FIELD("confidence", confidence),
      FLAG_FIELD("greedy", greedy),
      INT_FIELD("eval_episodes", eval_episodes),
      TEXT_FIELD("out_dir", out_dir),
      INT_FIELD("seed", seed),
  };
  return table;
}

#undef INT_FIELD
#undef REAL_FIELD
#undef FLAG_FIELD
#undef TEXT_FIELD

}  // namespace

void RunConfig::finalize() {
  try {
    game.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(radius > 0.0)) throw ConfigError("radius must be positive");
  if (task != "task1" && task != "task2" && task != "reach" && task != "file") {
    throw ConfigError("task: expected task1, task2, reach or file, got '" + task + "'");
  }
  if (task == "file" && spec_file.empty()) throw ConfigError("task = file needs spec_file");
  model.obs_dim = game.observation_width();
  model.n_agents = game.n_agents;
  model.n_actions = game::kNumActions;
  model.horizon = game.horizon;
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  train.seed = seed;
  train.gamma = game.gamma;
  train.validate();
  if (verify_n < 1) throw ConfigError("verify_n must be >= 1");
  if (!(confidence > 0.0 && confidence <= 0.9999)) throw ConfigError("confidence must be in (0, 0.9999]");
  if (eval_episodes < 0) throw ConfigError("eval_episodes must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

RunConfig parse_run_config(std::string_view text, const std::string& base_dir) {
  std::map<std::string, const Field*> index;
  for (const auto& [key, field] : fields()) index[key] = &field;
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ParseError("unknown key '" + key + "'", line_no);
    if (!seen.insert(key).second) throw ParseError("repeated key '" + key + "'", line_no);
    try {
      it->second->set(c, value);
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  if (!c.spec_file.empty() && !base_dir.empty() && std::filesystem::path(c.spec_file).is_relative()) {
    c.spec_file = (std::filesystem::path(base_dir) / c.spec_file).lexically_normal().string();
  }
  c.finalize();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), std::filesystem::path(path).parent_path().string());
}

std::string format_run_config(const RunConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

std::vector<stl::Spec> read_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read specification file " + path);
  std::vector<stl::Spec> specs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    try {
      specs.push_back(stl::parse_spec(body));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), e.position());
    }
  }
  if (specs.empty()) throw ParseError(path + ": no formula found", 0);
  return specs;
}

std::vector<stl::Spec> build_specs(const RunConfig& c) {
  const int n = c.game.n_agents;
  const int w = c.game.horizon;
  std::vector<stl::Spec> specs;
  if (c.task == "task1") {
    specs = game::build_task_1(n, w, c.radius);
  } else if (c.task == "task2") {
    specs = game::build_task_2(n, w, c.radius);
  } else if (c.task == "reach") {
    specs = game::build_reach_task(n, w, c.radius);
  } else {
    specs = read_spec_file(c.spec_file);
    if (specs.size() == 1) specs.assign(static_cast<std::size_t>(n), specs.front());
    if (static_cast<int>(specs.size()) != n) {
      throw ConfigError(c.spec_file + ": expected 1 or " + std::to_string(n) + " formulas, got " +
                        std::to_string(specs.size()));
    }
  }
  stl::Trajectory probe(game::entity_names(n));
  probe.push_state(std::vector<stl::Vec2>(2 * static_cast<std::size_t>(n), stl::Vec2{0.0, 0.0}));
  for (const auto& s : specs) {
    if (s.horizon() > c.game.horizon) {
      throw ConfigError("specification horizon " + std::to_string(s.horizon()) +
                        " exceeds the episode length " + std::to_string(c.game.horizon));
    }
    try {
      stl::prefix_robustness(s, stl::TraceView(probe));
    } catch (const TraceError& e) {
      throw ConfigError(std::string("specification refers to an unknown entity: ") + e.what());
    }
  }
  return specs;
}

}  // namespace tdmat::config
