#include "tdmat/stl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "tdmat/error.hpp"

namespace tdmat::stl {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Spec wrap(auto&& value) {
  return Spec(std::make_shared<const Node>(Node{std::forward<decltype(value)>(value)}));
}

double distance_margin(const node::Distance& atom, const TraceView& trace, std::size_t t) {
  const Vec2& a = trace.position(t, trace.entity_index(atom.entity_a));
  const Vec2& b = trace.position(t, trace.entity_index(atom.entity_b));
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  return atom.threshold - std::sqrt(dx * dx + dy * dy);
}

enum class Windows { strict, clipped };

struct Evaluator {
  const TraceView& trace;
  Windows mode;
  double floor;

  double rho(const Node& n, std::size_t t) const {
    return std::visit(
        overloaded{
            [](const node::True&) { return std::numeric_limits<double>::infinity(); },
            [&](const node::Distance& a) { return distance_margin(a, trace, t); },
            [&](const node::Named& a) { return a.predicate->margin(trace, t); },
            [&](const node::Not& a) { return -rho(*a.child, t); },
            [&](const node::And& a) { return std::min(rho(*a.left, t), rho(*a.right, t)); },
            [&](const node::Or& a) { return std::max(rho(*a.left, t), rho(*a.right, t)); },
            [&](const node::Eventually& a) {
              std::size_t lo = t + static_cast<std::size_t>(a.lower);
              std::size_t hi = t + static_cast<std::size_t>(a.upper);
              if (hi > trace.last()) {
                if (mode == Windows::strict) {
                  throw TraceError("eventually window [" + std::to_string(lo) + ", " +
                                   std::to_string(hi) + "] extends past trace end " +
                                   std::to_string(trace.last()));
                }
                hi = trace.last();
              }
              if (lo > hi) return floor;
              double best = rho(*a.child, lo);
              for (std::size_t k = lo + 1; k <= hi; ++k) best = std::max(best, rho(*a.child, k));
              return best;
            },
        },
        n.value);
  }

  bool holds(const Node& n, std::size_t t) const {
    return std::visit(
        overloaded{
            [](const node::True&) { return true; },
            [&](const node::Distance& a) { return distance_margin(a, trace, t) > 0.0; },
            [&](const node::Named& a) { return a.predicate->margin(trace, t) > 0.0; },
            [&](const node::Not& a) { return !holds(*a.child, t); },
            [&](const node::And& a) { return holds(*a.left, t) && holds(*a.right, t); },
            [&](const node::Or& a) { return holds(*a.left, t) || holds(*a.right, t); },
            [&](const node::Eventually& a) {
              const std::size_t lo = t + static_cast<std::size_t>(a.lower);
              const std::size_t hi = t + static_cast<std::size_t>(a.upper);
              if (hi > trace.last()) {
                throw TraceError("eventually window [" + std::to_string(lo) + ", " +
                                 std::to_string(hi) + "] extends past trace end " +
                                 std::to_string(trace.last()));
              }
              for (std::size_t k = lo; k <= hi; ++k) {
                if (holds(*a.child, k)) return true;
              }
              return false;
            },
        },
        n.value);
  }
};

void check_time(const TraceView& trace, std::size_t t) {
  if (trace.size() == 0) throw TraceError("empty trace");
  if (t > trace.last()) {
    throw TraceError("time " + std::to_string(t) + " outside trace of length " +
                     std::to_string(trace.size()));
  }
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void print(const Node& n, std::string& out) {
  std::visit(overloaded{
                 [&](const node::True&) { out += "true"; },
                 [&](const node::Distance& a) {
                   out += "dist(" + a.entity_a + ", " + a.entity_b + ") < " +
                          format_number(a.threshold);
                 },
                 [&](const node::Named& a) { out += a.predicate->name; },
                 [&](const node::Not& a) {
                   out += "not (";
                   print(*a.child, out);
                   out += ")";
                 },
                 [&](const node::And& a) {
                   out += "(";
                   print(*a.left, out);
                   out += " and ";
                   print(*a.right, out);
                   out += ")";
                 },
                 [&](const node::Or& a) {
                   out += "(";
                   print(*a.left, out);
                   out += " or ";
                   print(*a.right, out);
                   out += ")";
                 },
                 [&](const node::Eventually& a) {
                   out += "F[" + std::to_string(a.lower) + "," + std::to_string(a.upper) + "] (";
                   print(*a.child, out);
                   out += ")";
                 },
             },
             n.value);
}

bool same(const Node& a, const Node& b) {
  if (a.value.index() != b.value.index()) return false;
  return std::visit(
      overloaded{
          [](const node::True&) { return true; },
          [&](const node::Distance& x) {
            const auto& y = std::get<node::Distance>(b.value);
            return x.entity_a == y.entity_a && x.entity_b == y.entity_b &&
                   x.threshold == y.threshold;
          },
          [&](const node::Named& x) {
            return x.predicate->name == std::get<node::Named>(b.value).predicate->name;
          },
          [&](const node::Not& x) { return same(*x.child, *std::get<node::Not>(b.value).child); },
          [&](const node::And& x) {
            const auto& y = std::get<node::And>(b.value);
            return same(*x.left, *y.left) && same(*x.right, *y.right);
          },
          [&](const node::Or& x) {
            const auto& y = std::get<node::Or>(b.value);
            return same(*x.left, *y.left) && same(*x.right, *y.right);
          },
          [&](const node::Eventually& x) {
            const auto& y = std::get<node::Eventually>(b.value);
            return x.lower == y.lower && x.upper == y.upper && same(*x.child, *y.child);
          },
      },
      a.value);
}

int horizon_of(const Node& n) {
  return std::visit(overloaded{
                        [](const node::True&) { return 0; },
                        [](const node::Distance&) { return 0; },
                        [](const node::Named&) { return 0; },
                        [](const node::Not& a) { return horizon_of(*a.child); },
                        [](const node::And& a) {
                          return std::max(horizon_of(*a.left), horizon_of(*a.right));
                        },
                        [](const node::Or& a) {
                          return std::max(horizon_of(*a.left), horizon_of(*a.right));
                        },
                        [](const node::Eventually& a) { return a.upper + horizon_of(*a.child); },
                    },
                    n.value);
}

}  // namespace

Trajectory::Trajectory(std::vector<std::string> entity_names) : names_(std::move(entity_names)) {}

void Trajectory::push_state(std::vector<Vec2> positions) {
  if (positions.size() != names_.size()) {
    throw TraceError("state has " + std::to_string(positions.size()) + " positions, expected " +
                     std::to_string(names_.size()));
  }
  states_.push_back(std::move(positions));
}

std::size_t Trajectory::entity_index(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw TraceError("unknown entity '" + std::string(name) + "'");
}

TraceView::TraceView(const Trajectory& trace, std::size_t length) : trace_(&trace), length_(length) {
  if (length > trace.size()) throw TraceError("prefix longer than trace");
}

void PredicateRegistry::add(std::string name, MarginFn margin) {
  auto p = std::make_shared<const Predicate>(Predicate{name, std::move(margin)});
  entries_.insert_or_assign(std::move(name), std::move(p));
}

std::shared_ptr<const Predicate> PredicateRegistry::find(std::string_view name) const {
  auto it = entries_.find(name);
  return it == entries_.end() ? nullptr : it->second;
}

Spec::Spec() : root_(std::make_shared<const Node>(Node{node::True{}})) {}

Spec::Spec(std::shared_ptr<const Node> root) : root_(std::move(root)) {
  if (!root_) throw std::invalid_argument("null formula");
}

int Spec::horizon() const { return horizon_of(*root_); }

Spec make_true() { return Spec(); }

Spec make_distance(std::string entity_a, std::string entity_b, double threshold) {
  return wrap(node::Distance{std::move(entity_a), std::move(entity_b), threshold});
}

Spec make_predicate(std::shared_ptr<const Predicate> predicate) {
  if (!predicate) throw std::invalid_argument("null predicate");
  return wrap(node::Named{std::move(predicate)});
}

Spec negate(const Spec& child) { return wrap(node::Not{child.root_ptr()}); }

Spec both(const Spec& left, const Spec& right) {
  return wrap(node::And{left.root_ptr(), right.root_ptr()});
}

Spec either(const Spec& left, const Spec& right) {
  return wrap(node::Or{left.root_ptr(), right.root_ptr()});
}

Spec eventually(int lower, int upper, const Spec& child) {
  if (lower < 0) throw std::invalid_argument("negative window bound");
  if (upper < lower) throw std::invalid_argument("inverted window");
  return wrap(node::Eventually{lower, upper, child.root_ptr()});
}

Spec conjoin(std::span<const Spec> specs) {
  if (specs.empty()) throw std::invalid_argument("conjoin of an empty list");
  Spec acc = specs.front();
  for (std::size_t i = 1; i < specs.size(); ++i) acc = both(acc, specs[i]);
  return acc;
}

bool operator==(const Spec& a, const Spec& b) { return same(a.root(), b.root()); }

std::string to_string(const Spec& spec) {
  std::string out;
  print(spec.root(), out);
  return out;
}

bool evaluate_boolean(const Spec& spec, const TraceView& trace, std::size_t t) {
  check_time(trace, t);
  return Evaluator{trace, Windows::strict, 0.0}.holds(spec.root(), t);
}

double robustness(const Spec& spec, const TraceView& trace, std::size_t t) {
  check_time(trace, t);
  return Evaluator{trace, Windows::strict, 0.0}.rho(spec.root(), t);
}

double prefix_robustness(const Spec& spec, const TraceView& prefix, double floor) {
  check_time(prefix, 0);
  return Evaluator{prefix, Windows::clipped, floor}.rho(spec.root(), 0);
}

}  // namespace tdmat::stl
