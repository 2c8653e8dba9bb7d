#include "tdmat/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "tdmat/error.hpp"

namespace tdmat::model {

using ad::Group;
using ad::Mask;
using ad::Tape;
using ad::Tensor;
using ad::Var;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string(name) + " must be >= 1");
  };
  positive(obs_dim, "obs_dim");
  positive(embed_dim, "embed_dim");
  positive(n_heads, "n_heads");
  positive(n_encoder_blocks, "n_encoder_blocks");
  positive(n_value_blocks, "n_value_blocks");
  positive(n_decoder_blocks, "n_decoder_blocks");
  positive(n_actions, "n_actions");
  positive(n_agents, "n_agents");
  positive(horizon, "horizon");
  positive(ffn_multiplier, "ffn_multiplier");
  if (embed_dim % 4 != 0) {
    throw std::invalid_argument("embed_dim must be divisible by 4 (two even sinusoid halves)");
  }
  if (embed_dim % n_heads != 0) throw std::invalid_argument("embed_dim must be divisible by n_heads");
}

std::string ModelConfig::fingerprint() const {
  std::ostringstream s;
  s << "obs_dim=" << obs_dim << ";embed_dim=" << embed_dim << ";n_heads=" << n_heads
    << ";n_encoder_blocks=" << n_encoder_blocks << ";n_value_blocks=" << n_value_blocks
    << ";n_decoder_blocks=" << n_decoder_blocks << ";n_actions=" << n_actions
    << ";n_agents=" << n_agents << ";horizon=" << horizon << ";ffn_multiplier=" << ffn_multiplier;
  return s.str();
}

namespace {

struct Shape {
  std::string name;
  std::size_t rows, cols;
  Group group;
  enum Init { xavier, small, zeros, ones } init;
};

void attention_shapes(std::vector<Shape>& out, const std::string& p, std::size_t e, Group g) {
  for (const char* w : {".wq", ".wk", ".wv", ".wo"}) out.push_back({p + w, e, e, g, Shape::xavier});
  out.push_back({p + ".bo", 1, e, g, Shape::zeros});
}

void norm_shapes(std::vector<Shape>& out, const std::string& p, std::size_t e, Group g) {
  out.push_back({p + ".g", 1, e, g, Shape::ones});
  out.push_back({p + ".b", 1, e, g, Shape::zeros});
}

void ffn_shapes(std::vector<Shape>& out, const std::string& p, std::size_t e, std::size_t h,
                Group g) {
  out.push_back({p + ".w1", e, h, g, Shape::xavier});
  out.push_back({p + ".b1", 1, h, g, Shape::zeros});
  out.push_back({p + ".w2", h, e, g, Shape::xavier});
  out.push_back({p + ".b2", 1, e, g, Shape::zeros});
}

std::string block(const char* part, int k) { return std::string(part) + ".block" + std::to_string(k); }

std::vector<Shape> parameter_layout(const ModelConfig& c) {
  const auto e = static_cast<std::size_t>(c.embed_dim);
  const auto h = e * static_cast<std::size_t>(c.ffn_multiplier);
  std::vector<Shape> out;
  out.push_back({"enc.embed.w", static_cast<std::size_t>(c.obs_dim), e, Group::phi, Shape::xavier});
  out.push_back({"enc.embed.b", 1, e, Group::phi, Shape::zeros});
  for (int k = 0; k < c.n_encoder_blocks; ++k) {
    const std::string p = block("enc", k);
    attention_shapes(out, p + ".attn", e, Group::phi);
    norm_shapes(out, p + ".ln1", e, Group::phi);
    ffn_shapes(out, p + ".ffn", e, h, Group::phi);
    norm_shapes(out, p + ".ln2", e, Group::phi);
  }
  for (int k = 0; k < c.n_value_blocks; ++k) {
    const std::string p = block("val", k);
    attention_shapes(out, p + ".self", e, Group::phi);
    norm_shapes(out, p + ".ln1", e, Group::phi);
    attention_shapes(out, p + ".cross", e, Group::phi);
    norm_shapes(out, p + ".ln2", e, Group::phi);
    ffn_shapes(out, p + ".ffn", e, h, Group::phi);
    norm_shapes(out, p + ".ln3", e, Group::phi);
  }
  out.push_back({"val.head.w", e, 1, Group::phi, Shape::xavier});
  out.push_back({"val.head.b", 1, 1, Group::phi, Shape::zeros});
  out.push_back({"dec.embed", static_cast<std::size_t>(c.n_actions + 1), e, Group::theta,
                 Shape::xavier});
  for (int k = 0; k < c.n_decoder_blocks; ++k) {
    const std::string p = block("dec", k);
    attention_shapes(out, p + ".self", e, Group::theta);
    norm_shapes(out, p + ".ln1", e, Group::theta);
    attention_shapes(out, p + ".cross", e, Group::theta);
    norm_shapes(out, p + ".ln2", e, Group::theta);
    ffn_shapes(out, p + ".ffn", e, h, Group::theta);
    norm_shapes(out, p + ".ln3", e, Group::theta);
  }
  out.push_back({"dec.head.w", e, static_cast<std::size_t>(c.n_actions), Group::theta, Shape::small});
  out.push_back({"dec.head.b", 1, static_cast<std::size_t>(c.n_actions), Group::theta, Shape::zeros});
  return out;
}

Var param(Tape& tape, const TdmatPolicy& policy, const std::string& name) {
  return tape.parameter(policy.params(), name);
}

Var linear(Tape& tape, const TdmatPolicy& policy, Var x, const std::string& w, const std::string& b) {
  return ad::add_row(ad::matmul(x, param(tape, policy, w)), param(tape, policy, b));
}

Var norm(Tape& tape, const TdmatPolicy& policy, Var x, const std::string& p) {
  return ad::layer_norm(x, param(tape, policy, p + ".g"), param(tape, policy, p + ".b"));
}

Var feed_forward(Tape& tape, const TdmatPolicy& policy, Var x, const std::string& p) {
  Var h = ad::gelu(linear(tape, policy, x, p + ".w1", p + ".b1"));
  return linear(tape, policy, h, p + ".w2", p + ".b2");
}

// rows with time <= query time (cross) or == query time (self).
Mask time_mask(std::span<const int> query_times, std::span<const int> key_times, bool same_only) {
  Mask m(query_times.size(), key_times.size(), false);
  for (std::size_t r = 0; r < query_times.size(); ++r) {
    for (std::size_t c = 0; c < key_times.size(); ++c) {
      m.set(r, c, same_only ? key_times[c] == query_times[r] : key_times[c] <= query_times[r]);
    }
  }
  return m;
}

// Value decoder over query rows [q0, q0 + qn) against history rows [0, kv_n).
Var value_decoder(Tape& tape, const TdmatPolicy& policy, const EncoderOutput& enc, std::size_t q0,
                  std::size_t qn, std::size_t kv_n) {
  const ModelConfig& c = policy.config();
  std::span<const int> times(enc.time_ids);
  const auto q_times = times.subspan(q0, qn);
  const auto kv_times = times.subspan(0, kv_n);
  const Mask self_mask = time_mask(q_times, q_times, true);
  const Mask cross_mask = time_mask(q_times, kv_times, false);
  Var history = ad::slice_rows(enc.rep, 0, kv_n);
  Var x = ad::slice_rows(enc.rep, q0, qn);
  for (int k = 0; k < c.n_value_blocks; ++k) {
    const std::string p = block("val", k);
    x = norm(tape, policy, ad::add(x, attention(tape, policy, p + ".self", x, x, self_mask)), p + ".ln1");
    x = norm(tape, policy, ad::add(x, attention(tape, policy, p + ".cross", x, history, cross_mask)),
             p + ".ln2");
    x = norm(tape, policy, ad::add(x, feed_forward(tape, policy, x, p + ".ffn")), p + ".ln3");
  }
  return linear(tape, policy, x, "val.head.w", "val.head.b");
}

// Action decoder over `steps` blocks of n_agents positions. `queries` holds
// the encoder row for each (step, position) already permuted into `order`.
// Position k of a step carries the token of the action chosen at position
// k - 1 (the start token at k = 0) and sees positions <= k of its own step.
Var action_decoder(Tape& tape, const TdmatPolicy& policy, Var queries,
                   std::span<const int> token_ids, std::span<const int> step_ids,
                   std::span<const int> positions) {
  const ModelConfig& c = policy.config();
  const std::size_t n = token_ids.size();
  Mask causal(n, n, false);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t col = 0; col < n; ++col) {
      causal.set(r, col, step_ids[col] == step_ids[r] && positions[col] <= positions[r]);
    }
  }
  Tensor pos(n, static_cast<std::size_t>(c.embed_dim), 0.0);
  const std::size_t half = static_cast<std::size_t>(c.embed_dim / 2);
  for (std::size_t r = 0; r < n; ++r) {
    const auto term = positional_term(0, positions[r], c.embed_dim);
    for (std::size_t j = half; j < term.size(); ++j) pos(r, j) = term[j];
  }
  Var x = ad::add(ad::embedding_lookup(param(tape, policy, "dec.embed"), token_ids),
                  tape.constant(std::move(pos)));
  for (int k = 0; k < c.n_decoder_blocks; ++k) {
    const std::string p = block("dec", k);
    x = norm(tape, policy, ad::add(x, attention(tape, policy, p + ".self", x, x, causal)), p + ".ln1");
    x = norm(tape, policy,
             ad::add(queries, attention(tape, policy, p + ".cross", queries, x, causal)), p + ".ln2");
    x = norm(tape, policy, ad::add(x, feed_forward(tape, policy, x, p + ".ffn")), p + ".ln3");
  }
  return ad::softmax(linear(tape, policy, x, "dec.head.w", "dec.head.b"));
}

void check_order(std::span<const int> order, int n_agents) {
  if (static_cast<int>(order.size()) != n_agents) throw std::invalid_argument("agent order size");
  std::vector<bool> seen(n_agents, false);
  for (int a : order) {
    if (a < 0 || a >= n_agents || seen[a]) throw std::invalid_argument("agent order is not a permutation");
    seen[a] = true;
  }
}

}  // namespace

TdmatPolicy::TdmatPolicy(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, 0x1417ULL));
  for (const Shape& s : parameter_layout(config_)) {
    Tensor t(s.rows, s.cols, 0.0);
    const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
    for (double& v : t.data()) {
      switch (s.init) {
        case Shape::xavier: v = rng.uniform(-limit, limit); break;
        case Shape::small: v = 0.01 * rng.uniform(-limit, limit); break;
        case Shape::zeros: v = 0.0; break;
        case Shape::ones: v = 1.0; break;
      }
    }
    params_.add(s.name, std::move(t), s.group);
  }
}

TdmatPolicy::TdmatPolicy(ModelConfig config, ad::ParameterSet params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto layout = parameter_layout(config_);
  if (layout.size() != params_.names().size()) {
    throw CheckpointError("parameter count " + std::to_string(params_.names().size()) +
                          " does not match architecture (" + std::to_string(layout.size()) + ")");
  }
  for (const Shape& s : layout) {
    if (!params_.contains(s.name)) throw CheckpointError("missing parameter " + s.name);
    const Tensor& t = params_.at(s.name);
    if (t.shape() != std::vector<std::size_t>{s.rows, s.cols}) {
      throw CheckpointError("parameter " + s.name + " has shape " + ad::shape_string(t.shape()) +
                            ", architecture expects " + ad::shape_string({s.rows, s.cols}));
    }
    if (params_.group(s.name) != s.group) throw CheckpointError("parameter group mismatch for " + s.name);
  }
}

std::vector<double> positional_term(int time, int agent, int embed_dim) {
  const int half = embed_dim / 2;
  std::vector<double> out(static_cast<std::size_t>(embed_dim), 0.0);
  auto fill = [&](int offset, int pos) {
    for (int k = 0; k < half / 2; ++k) {
      const double freq = std::pow(10000.0, -2.0 * k / static_cast<double>(half));
      out[offset + 2 * k] = std::sin(pos * freq);
      out[offset + 2 * k + 1] = std::cos(pos * freq);
    }
  };
  fill(0, time);
  fill(half, agent);
  return out;
}

TokenBatch encode_positions(Tape& tape, const TdmatPolicy& policy, const Tensor& observations,
                            std::span<const int> agent_ids, std::span<const int> time_ids) {
  const ModelConfig& c = policy.config();
  const std::size_t m = observations.rows();
  if (observations.cols() != static_cast<std::size_t>(c.obs_dim)) {
    throw ShapeError("observation width " + std::to_string(observations.cols()) + ", expected " +
                     std::to_string(c.obs_dim));
  }
  if (agent_ids.size() != m || time_ids.size() != m) throw ShapeError("one id pair per token");
  Tensor pos(m, static_cast<std::size_t>(c.embed_dim), 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    if (agent_ids[r] < 0 || agent_ids[r] >= c.n_agents) throw std::out_of_range("agent id out of range");
    if (time_ids[r] < 0 || time_ids[r] > c.horizon) throw std::out_of_range("time id out of range");
    const auto term = positional_term(time_ids[r], agent_ids[r], c.embed_dim);
    std::copy(term.begin(), term.end(), &pos(r, 0));
  }
  Var x = linear(tape, policy, tape.constant(observations), "enc.embed.w", "enc.embed.b");
  return {ad::add(x, tape.constant(std::move(pos))), {agent_ids.begin(), agent_ids.end()},
          {time_ids.begin(), time_ids.end()}};
}

TokenBatch encode_history(Tape& tape, const TdmatPolicy& policy,
                          std::span<const game::ObservationSet> history) {
  const ModelConfig& c = policy.config();
  if (history.empty()) throw std::invalid_argument("empty observation history");
  const std::size_t n = static_cast<std::size_t>(c.n_agents);
  Tensor obs(history.size() * n, static_cast<std::size_t>(c.obs_dim), 0.0);
  std::vector<int> agents, times;
  for (std::size_t t = 0; t < history.size(); ++t) {
    if (history[t].size() != n) throw ShapeError("observation set has wrong agent count");
    for (std::size_t i = 0; i < n; ++i) {
      if (history[t][i].size() != static_cast<std::size_t>(c.obs_dim)) {
        throw ShapeError("observation width " + std::to_string(history[t][i].size()) +
                         ", expected " + std::to_string(c.obs_dim));
      }
      std::copy(history[t][i].begin(), history[t][i].end(), &obs(t * n + i, 0));
      agents.push_back(static_cast<int>(i));
      times.push_back(static_cast<int>(t));
    }
  }
  return encode_positions(tape, policy, obs, agents, times);
}

Var scaled_dot_attention(Var q, Var k, Var v, const Mask& mask) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return ad::matmul(ad::masked_softmax(ad::scale(ad::matmul_bt(q, k), inv), mask), v);
}

Var attention(Tape& tape, const TdmatPolicy& policy, const std::string& prefix, Var query_in,
              Var kv_in, const Mask& mask) {
  const ModelConfig& c = policy.config();
  const std::size_t dk = static_cast<std::size_t>(c.embed_dim / c.n_heads);
  Var q = ad::matmul(query_in, param(tape, policy, prefix + ".wq"));
  Var k = ad::matmul(kv_in, param(tape, policy, prefix + ".wk"));
  Var v = ad::matmul(kv_in, param(tape, policy, prefix + ".wv"));
  std::vector<Var> heads;
  for (int h = 0; h < c.n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dk;
    heads.push_back(scaled_dot_attention(ad::slice_cols(q, off, dk), ad::slice_cols(k, off, dk),
                                         ad::slice_cols(v, off, dk), mask));
  }
  Var joined = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  return linear(tape, policy, joined, prefix + ".wo", prefix + ".bo");
}

EncoderOutput encoder_forward(Tape& tape, const TdmatPolicy& policy, const TokenBatch& tokens) {
  const Mask mask = time_mask(tokens.time_ids, tokens.time_ids, false);
  Var x = tokens.tokens;
  for (int k = 0; k < policy.config().n_encoder_blocks; ++k) {
    const std::string p = block("enc", k);
    x = norm(tape, policy, ad::add(x, attention(tape, policy, p + ".attn", x, x, mask)), p + ".ln1");
    x = norm(tape, policy, ad::add(x, feed_forward(tape, policy, x, p + ".ffn")), p + ".ln2");
  }
  return {x, tokens.agent_ids, tokens.time_ids};
}

Var value_forward(Tape& tape, const TdmatPolicy& policy, const EncoderOutput& enc, int t) {
  const std::size_t n = static_cast<std::size_t>(policy.config().n_agents);
  const std::size_t q0 = static_cast<std::size_t>(t) * n;
  if (t < 0 || q0 + n > enc.time_ids.size()) throw std::out_of_range("value_forward time out of range");
  for (std::size_t r = q0; r < q0 + n; ++r) {
    if (enc.time_ids[r] != t) throw ShapeError("encoder rows are not time-major");
  }
  return value_decoder(tape, policy, enc, q0, n, q0 + n);
}

Var value_forward_all(Tape& tape, const TdmatPolicy& policy, const EncoderOutput& enc) {
  const std::size_t m = enc.time_ids.size();
  const std::size_t n = static_cast<std::size_t>(policy.config().n_agents);
  Var v = value_decoder(tape, policy, enc, 0, m, m);
  return ad::reshape(v, m / n, n);
}

double robust_value(std::span<const double> agent_values) {
  if (agent_values.empty()) throw std::invalid_argument("no agent values");
  double s = 0.0;
  for (double v : agent_values) s += v;
  return s / static_cast<double>(agent_values.size());
}

std::vector<int> identity_order(int n_agents) {
  std::vector<int> order(static_cast<std::size_t>(n_agents));
  for (int i = 0; i < n_agents; ++i) order[i] = i;
  return order;
}

Var decode_actions(Tape& tape, const TdmatPolicy& policy, Var current, std::span<const int> prior,
                   std::span<const int> order) {
  const ModelConfig& c = policy.config();
  check_order(order, c.n_agents);
  if (prior.size() >= order.size()) throw std::invalid_argument("every agent already has an action");
  if (current.rows() != static_cast<std::size_t>(c.n_agents)) {
    throw ShapeError("current representation must have one row per agent");
  }
  const std::size_t len = prior.size() + 1;
  std::vector<int> tokens(len), steps(len, 0), positions(len), query_rows(len);
  for (std::size_t k = 0; k < len; ++k) {
    if (k > 0 && (prior[k - 1] < 0 || prior[k - 1] >= c.n_actions)) {
      throw std::invalid_argument("prior action out of range");
    }
    tokens[k] = k == 0 ? c.n_actions : prior[k - 1];
    positions[k] = static_cast<int>(k);
    query_rows[k] = order[k];
  }
  Var queries = ad::embedding_lookup(current, query_rows);
  Var probs = action_decoder(tape, policy, queries, tokens, steps, positions);
  return ad::slice_rows(probs, len - 1, 1);
}

namespace {

struct DecoderBatch {
  Var probs;  // rows in (step, position) order
  std::vector<int> taken;
  std::vector<int> by_agent;  // (step, agent id) row -> (step, position) row
};

DecoderBatch decode_batch(Tape& tape, const TdmatPolicy& policy, Var reps,
                          std::span<const game::JointAction> actions, std::span<const int> order) {
  const ModelConfig& c = policy.config();
  check_order(order, c.n_agents);
  const std::size_t n = static_cast<std::size_t>(c.n_agents);
  const std::size_t steps = actions.size();
  if (reps.rows() != steps * n) throw ShapeError("one encoder row per (step, agent) expected");
  std::vector<int> tokens, step_ids, positions, query_rows;
  DecoderBatch out;
  out.by_agent.resize(steps * n);
  for (std::size_t s = 0; s < steps; ++s) {
    if (actions[s].size() != n) throw ShapeError("joint action has wrong agent count");
    for (std::size_t k = 0; k < n; ++k) {
      tokens.push_back(k == 0 ? c.n_actions : actions[s][order[k - 1]]);
      step_ids.push_back(static_cast<int>(s));
      positions.push_back(static_cast<int>(k));
      query_rows.push_back(static_cast<int>(s * n) + order[k]);
      out.taken.push_back(actions[s][order[k]]);
      out.by_agent[s * n + order[k]] = static_cast<int>(s * n + k);
    }
  }
  Var queries = ad::embedding_lookup(reps, query_rows);
  out.probs = action_decoder(tape, policy, queries, tokens, step_ids, positions);
  return out;
}

}  // namespace

Var action_distributions(Tape& tape, const TdmatPolicy& policy, Var reps,
                         std::span<const game::JointAction> actions, std::span<const int> order) {
  const DecoderBatch b = decode_batch(tape, policy, reps, actions, order);
  return ad::embedding_lookup(b.probs, b.by_agent);
}

Var log_prob_all(Tape& tape, const TdmatPolicy& policy, Var reps,
                 std::span<const game::JointAction> actions, std::span<const int> order) {
  const DecoderBatch b = decode_batch(tape, policy, reps, actions, order);
  Var logp = ad::log(ad::pick(b.probs, b.taken));
  return ad::reshape(ad::embedding_lookup(logp, b.by_agent), actions.size(),
                     static_cast<std::size_t>(policy.config().n_agents));
}

JointSample sample_joint_action(const TdmatPolicy& policy,
                                std::span<const game::ObservationSet> history,
                                std::span<const int> order, Rng& rng, bool greedy) {
  const ModelConfig& c = policy.config();
  check_order(order, c.n_agents);
  Tape tape(false);
  const TokenBatch tokens = encode_history(tape, policy, history);
  const EncoderOutput enc = encoder_forward(tape, policy, tokens);
  const int t = static_cast<int>(history.size()) - 1;
  const std::size_t n = static_cast<std::size_t>(c.n_agents);
  const Tensor values = value_forward(tape, policy, enc, t).value();
  Var current = ad::slice_rows(enc.rep, static_cast<std::size_t>(t) * n, n);

  JointSample out;
  out.actions.assign(n, 0);
  out.log_probs.assign(n, 0.0);
  out.values.assign(n, 0.0);
  out.probs.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) out.values[i] = values[i];
  std::vector<int> prior;
  for (std::size_t k = 0; k < n; ++k) {
    const Tensor& p = decode_actions(tape, policy, current, prior, order).value();
    std::vector<double> probs(p.data().begin(), p.data().end());
    int a = 0;
    if (greedy) {
      a = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    } else {
      a = rng.categorical(probs);
    }
    const int agent = order[k];
    out.actions[agent] = a;
    out.log_probs[agent] = std::log(probs[a]);
    out.probs[agent] = std::move(probs);
    prior.push_back(a);
  }
  return out;
}

}  // namespace tdmat::model
