#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "doctest.h"
#include "tdmat/autodiff.hpp"
#include "tdmat/error.hpp"

using namespace tdmat;
using namespace tdmat::ad;

namespace {

Tensor random_tensor(std::mt19937_64& g, std::size_t r, std::size_t c, double lo = -1.0,
                     double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c, 0.0);
  for (double& v : t.data()) v = u(g);
  return t;
}

// Loss = sum(op(x, y) * W) for a fixed random W, so every output element
// contributes with a distinct weight.
double check_op(const std::function<Var(Tape&, Var, Var)>& op, Tensor x, Tensor y,
                std::uint64_t seed = 1) {
  std::mt19937_64 g(seed);
  ParameterSet params;
  params.add("x", std::move(x), Group::phi);
  params.add("y", std::move(y), Group::theta);
  Tensor weight;
  {
    Tape probe(false);
    const Tensor& out = op(probe, probe.parameter(params, "x"), probe.parameter(params, "y")).value();
    weight = random_tensor(g, out.rows(), out.cols());
  }
  auto loss = [&](Tape& tape, const ParameterSet& p) {
    Var out = op(tape, tape.parameter(p, "x"), tape.parameter(p, "y"));
    return sum(mul(out, tape.constant(weight)));
  };
  return grad_check(loss, params).max_rel_error;
}

}  // namespace

TEST_CASE("matrix op gradients match central differences") {
  std::mt19937_64 g(5);
  const Tensor a = random_tensor(g, 3, 4), b = random_tensor(g, 4, 2), c = random_tensor(g, 3, 4);
  const Tensor row = random_tensor(g, 1, 4), bt = random_tensor(g, 5, 4);
  CHECK(check_op([](Tape&, Var x, Var y) { return matmul(x, y); }, a, b) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) { return matmul_bt(x, y); }, a, bt) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) { return add(x, y); }, a, c) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) { return sub(x, y); }, a, c) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) { return mul(x, y); }, a, c) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) { return add_row(x, y); }, a, row) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) { return minimum(x, y); }, a, c) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) {
          const Var parts[] = {x, y, x};
          return concat_cols(parts);
        }, a, c) < 1e-6);
  CHECK(check_op([](Tape&, Var x, Var y) {
          const Var parts[] = {y, x};
          return concat_rows(parts);
        }, a, c) < 1e-6);
}

TEST_CASE("elementwise and reduction gradients") {
  std::mt19937_64 g(6);
  const Tensor a = random_tensor(g, 3, 5), pos = random_tensor(g, 3, 5, 0.5, 2.0);
  const Tensor unused = random_tensor(g, 1, 1);
  auto unary = [&](std::function<Var(Var)> f, const Tensor& x) {
    return check_op([f](Tape&, Var v, Var) { return f(v); }, x, unused);
  };
  CHECK(unary([](Var v) { return gelu(v); }, a) < 1e-6);
  CHECK(unary([](Var v) { return relu(v); }, a) < 1e-6);
  CHECK(unary([](Var v) { return exp(v); }, a) < 1e-6);
  CHECK(unary([](Var v) { return log(v); }, pos) < 1e-6);
  CHECK(unary([](Var v) { return square(v); }, a) < 1e-6);
  CHECK(unary([](Var v) { return scale(v, -2.5); }, a) < 1e-6);
  CHECK(unary([](Var v) { return add_scalar(v, 3.0); }, a) < 1e-6);
  CHECK(unary([](Var v) { return clamp(v, -0.5, 0.5); }, a) < 1e-6);
  CHECK(unary([](Var v) { return softmax(v); }, a) < 1e-6);
  CHECK(unary([](Var v) { return reshape(v, 5, 3); }, a) < 1e-6);
  CHECK(unary([](Var v) { return slice_cols(v, 1, 3); }, a) < 1e-6);
  CHECK(unary([](Var v) { return slice_rows(v, 1, 2); }, a) < 1e-6);
  CHECK(unary([](Var v) { return mean(v); }, a) < 1e-6);
  CHECK(unary([](Var v) {
          const int idx[] = {4, 0, 2};
          return pick(v, idx);
        }, a) < 1e-6);
  CHECK(unary([](Var v) {
          const int idx[] = {2, 0, 2, 1};
          return embedding_lookup(v, idx);
        }, a) < 1e-6);
}

TEST_CASE("layer norm and masked softmax gradients") {
  std::mt19937_64 g(7);
  const Tensor x = random_tensor(g, 4, 6), gain = random_tensor(g, 1, 6, 0.5, 1.5);
  CHECK(check_op([&](Tape& tape, Var v, Var gn) {
          return layer_norm(v, gn, tape.constant(Tensor(1, 6, 0.1)));
        }, x, gain) < 1e-5);
  Mask m(4, 6, false);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c <= r + 1; ++c) m.set(r, c, true);
  }
  CHECK(check_op([&](Tape&, Var v, Var) { return masked_softmax(v, m); }, x, gain) < 1e-6);
}

TEST_CASE("masked softmax rows are probability vectors with exact zeros") {
  Tape tape(false);
  Mask m(2, 3, true);
  m.set(0, 2, false);
  Var p = masked_softmax(tape.constant(Tensor(2, 3, std::vector<double>{1, 2, 50, 0, 0, 0})), m);
  const Tensor& v = p.value();
  CHECK(v(0, 2) == 0.0);
  CHECK(v(0, 0) + v(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(v(1, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  Mask none(1, 2, false);
  CHECK_THROWS_AS(masked_softmax(tape.constant(Tensor(1, 2, 0.0)), none), ShapeError);
}

TEST_CASE("gelu uses the exact erf form") {
  Tape tape(false);
  Var y = gelu(tape.constant(Tensor(1, 2, std::vector<double>{1.0, -0.5})));
  CHECK(y.value()[0] == doctest::Approx(0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)))).epsilon(1e-15));
  CHECK(y.value()[1] == doctest::Approx(-0.25 * (1.0 + std::erf(-0.5 / std::sqrt(2.0)))).epsilon(1e-15));
}

TEST_CASE("shape violations and non-finite values throw") {
  Tape tape;
  Var a = tape.constant(Tensor(2, 3, 1.0));
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(add(a, tape.constant(Tensor(3, 2, 1.0))), ShapeError);
  CHECK_THROWS_AS(log(tape.constant(Tensor(1, 1, -1.0))), NumericError);
  CHECK_THROWS_AS(exp(tape.constant(Tensor(1, 1, 1000.0))), NumericError);
  ParameterSet p;
  p.add("w", Tensor(2, 3, 1.0), Group::phi);
  CHECK_THROWS_AS(tape.backward(mul(a, tape.parameter(p, "w")), p), ShapeError);
}

TEST_CASE("shared parameter nodes accumulate and unused parameters get zeros") {
  ParameterSet p;
  p.add("w", Tensor(1, 2, std::vector<double>{2.0, -3.0}), Group::phi);
  p.add("unused", Tensor(2, 2, 5.0), Group::theta);
  Tape tape;
  Var w = tape.parameter(p, "w");
  CHECK(tape.parameter(p, "w").id() == w.id());
  Var loss = sum(add(mul(w, w), w));  // d/dw = 2w + 1
  Gradients grads = tape.backward(loss, p);
  CHECK(grads.at("w")[0] == 5.0);
  CHECK(grads.at("w")[1] == -5.0);
  CHECK(grads.at("unused") == Tensor(2, 2, 0.0));
}

TEST_CASE("detach blocks gradient flow") {
  ParameterSet p;
  p.add("w", Tensor(1, 1, 3.0), Group::phi);
  Tape tape;
  Var w = tape.parameter(p, "w");
  Gradients grads = tape.backward(mul(w, detach(w)), p);
  CHECK(grads.at("w").item() == 3.0);
}

TEST_CASE("checkpoint round trip") {
  std::mt19937_64 g(9);
  ParameterSet p;
  p.add("enc.w", random_tensor(g, 3, 4), Group::phi);
  p.add("dec.b", random_tensor(g, 1, 5), Group::theta);
  std::stringstream s;
  save_checkpoint(s, p, "meta data");
  const Checkpoint back = load_checkpoint(s);
  CHECK(back.metadata == "meta data");
  CHECK(back.params.names() == p.names());
  CHECK(back.params.at("enc.w") == p.at("enc.w"));
  CHECK(back.params.at("dec.b") == p.at("dec.b"));
  CHECK(back.params.group("dec.b") == Group::theta);
}

TEST_CASE("corrupt checkpoints are rejected") {
  ParameterSet p;
  p.add("w", Tensor(2, 2, 1.5), Group::phi);
  std::stringstream s;
  save_checkpoint(s, p, "m");
  const std::string good = s.str();
  auto load = [](const std::string& bytes) {
    std::istringstream in(bytes);
    return load_checkpoint(in);
  };
  std::string flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(load(flipped), CheckpointError);
  CHECK_THROWS_AS(load(good.substr(0, good.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(load(good + "x"), CheckpointError);
  std::string magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(load(magic), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(std::string("/nonexistent/file.ckpt")), CheckpointError);
}

TEST_CASE("grad_check reports the worst coordinate") {
  ParameterSet p;
  p.add("w", Tensor(1, 3, std::vector<double>{0.5, -1.0, 2.0}), Group::phi);
  // Analytic loss deliberately wrong in coordinate 2.
  auto analytic = [](Tape& tape, const ParameterSet& ps) {
    Var w = tape.parameter(ps, "w");
    Var last = tape.constant(Tensor(1, 3, std::vector<double>{0, 0, 1}));
    return sum(add(square(w), mul(detach(square(w)), last)));
  };
  auto numeric = [](const ParameterSet& ps) {
    double s = 0.0;
    for (double v : ps.at("w").data()) s += v * v;
    return s + ps.at("w")[2] * ps.at("w")[2];
  };
  const GradCheckResult r = grad_check(analytic, numeric, p);
  CHECK(r.worst_index == 2);
  CHECK(r.max_rel_error > 0.4);
  CHECK(r.coords == 3);
}
