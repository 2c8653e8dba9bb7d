#pragma once

// Signal temporal logic fragment: true, predicates, not, and, or and
// bounded eventually over discrete time steps.

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace tdmat::stl {

using Vec2 = std::array<double, 2>;

/// Time-indexed sequence of global states. Each state maps a fixed set of
/// named entities (agents, landmarks) to planar positions.
class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(std::vector<std::string> entity_names);

  /// Appends the state for the next time index. `positions` follows the
  /// entity order given at construction.
  void push_state(std::vector<Vec2> positions);

  std::size_t size() const noexcept { return states_.size(); }
  bool empty() const noexcept { return states_.empty(); }
  const std::vector<std::string>& entity_names() const noexcept { return names_; }

  /// Throws TraceError for unknown names.
  std::size_t entity_index(std::string_view name) const;
  const Vec2& position(std::size_t t, std::size_t entity) const { return states_[t][entity]; }
  const std::vector<Vec2>& state(std::size_t t) const { return states_[t]; }

  bool operator==(const Trajectory&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<Vec2>> states_;
};

/// Read-only prefix s_{0:t} of a trajectory (`size() == t + 1`).
class TraceView {
 public:
  TraceView(const Trajectory& trace)  // NOLINT(google-explicit-constructor)
      : trace_(&trace), length_(trace.size()) {}
  TraceView(const Trajectory& trace, std::size_t length);

  std::size_t size() const noexcept { return length_; }
  std::size_t last() const noexcept { return length_ - 1; }
  const Trajectory& trace() const noexcept { return *trace_; }
  const Vec2& position(std::size_t t, std::size_t entity) const { return trace_->position(t, entity); }
  std::size_t entity_index(std::string_view name) const { return trace_->entity_index(name); }

 private:
  const Trajectory* trace_;
  std::size_t length_;
};

/// Margin of a predicate at time t: satisfied iff margin > 0.
using MarginFn = std::function<double(const TraceView&, std::size_t)>;

struct Predicate {
  std::string name;
  MarginFn margin;
};

class PredicateRegistry {
 public:
  void add(std::string name, MarginFn margin);
  std::shared_ptr<const Predicate> find(std::string_view name) const;

 private:
  std::map<std::string, std::shared_ptr<const Predicate>, std::less<>> entries_;
};

struct Node;

namespace node {
struct True {};
/// ||p_a - p_b||_2 < threshold, margin threshold - ||p_a - p_b||_2.
struct Distance {
  std::string entity_a;
  std::string entity_b;
  double threshold;
};
struct Named {
  std::shared_ptr<const Predicate> predicate;
};
struct Not {
  std::shared_ptr<const Node> child;
};
struct And {
  std::shared_ptr<const Node> left, right;
};
struct Or {
  std::shared_ptr<const Node> left, right;
};
/// Eventually within [t + lower, t + upper], inclusive step indices.
struct Eventually {
  int lower;
  int upper;
  std::shared_ptr<const Node> child;
};
}  // namespace node

struct Node {
  std::variant<node::True, node::Distance, node::Named, node::Not, node::And, node::Or,
               node::Eventually>
      value;
};

/// Immutable formula handle. Copies share structure.
class Spec {
 public:
  Spec();  // true
  explicit Spec(std::shared_ptr<const Node> root);

  const Node& root() const { return *root_; }
  const std::shared_ptr<const Node>& root_ptr() const { return root_; }

  /// Largest time offset the formula reads relative to its evaluation time.
  int horizon() const;

 private:
  std::shared_ptr<const Node> root_;
};

Spec make_true();
Spec make_distance(std::string entity_a, std::string entity_b, double threshold);
Spec make_predicate(std::shared_ptr<const Predicate> predicate);
Spec negate(const Spec& child);
Spec both(const Spec& left, const Spec& right);
Spec either(const Spec& left, const Spec& right);
/// Throws std::invalid_argument unless 0 <= lower <= upper.
Spec eventually(int lower, int upper, const Spec& child);

/// Left-folded conjunction; throws std::invalid_argument for an empty list.
Spec conjoin(std::span<const Spec> specs);

/// Structural equality (named predicates compare by name).
bool operator==(const Spec& a, const Spec& b);

/// Fully parenthesised concrete syntax; parse(to_string(s)) == s.
std::string to_string(const Spec& spec);

/// Grammar (precedence not/F > and > or, binary operators left-assoc):
///   phi  := "true" | atom | "not" phi | phi "and" phi | phi "or" phi
///         | "F[" INT "," INT "]" phi | "(" phi ")"
///   atom := IDENT | "dist(" IDENT "," IDENT ")" "<" NUMBER
/// Throws ParseError with the byte offset of the offending token.
Spec parse_spec(std::string_view text, const PredicateRegistry& registry = {});

/// Boolean semantics at time t. Every window [t+a, t+b] must lie inside
/// the trace; otherwise TraceError.
bool evaluate_boolean(const Spec& spec, const TraceView& trace, std::size_t t);

/// Quantitative robustness at time t under the same window contract.
double robustness(const Spec& spec, const TraceView& trace, std::size_t t);

inline constexpr double kDefaultRobustnessFloor = -10.0;

/// Robustness at time 0 of a prefix, with each window clipped to the
/// observed indices. An empty clipped window evaluates to `floor`.
double prefix_robustness(const Spec& spec, const TraceView& prefix,
                         double floor = kDefaultRobustnessFloor);

}  // namespace tdmat::stl
