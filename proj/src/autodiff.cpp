#include "tdmat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <sstream>

#include "tdmat/error.hpp"
#include "tdmat/random.hpp"

namespace tdmat::ad {

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (auto d : shape_) n *= d;
  data_.assign(n, fill);
}

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : shape_{rows, cols}, data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : shape_{rows, cols}, data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match " +
                     shape_string(shape_));
  }
}

std::size_t Tensor::rows() const {
  if (shape_.size() != 2) throw ShapeError("rank-2 tensor expected, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() != 2) throw ShapeError("rank-2 tensor expected, got " + shape_string(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// ParameterSet

void ParameterSet::add(const std::string& name, Tensor value, Group group) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  order_.push_back(name);
  index_.emplace(name, Entry{std::move(value), group});
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second.value;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second.value;
}

Group ParameterSet::group(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second.group;
}

std::vector<std::string> ParameterSet::names(Group g) const {
  std::vector<std::string> out;
  for (const auto& n : order_) {
    if (index_.at(n).group == g) out.push_back(n);
  }
  return out;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : index_) n += e.value.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.numel() == 0 && value(id).numel() != 0) n.grad = Tensor(value(id).shape(), 0.0);
  return n.grad;
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const ParameterSet& params, const std::string& name) {
  auto it = parameter_nodes_.find(name);
  if (it != parameter_nodes_.end()) return Var(this, it->second);
  Node n;
  n.external = &params.at(name);
  n.requires_grad = record_;
  n.parameter = name;
  nodes_.push_back(std::move(n));
  parameter_nodes_.emplace(name, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
                 const char* op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward), op);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward, const char* op) {
  for (double v : value.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& in : inputs) {
      if (nodes_[in.id()].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var loss, const ParameterSet& params) {
  if (loss.value().numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_string(loss.value().shape()));
  }
  Gradients out;
  if (nodes_[loss.id()].requires_grad) {
    grad(loss.id())[0] = 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.numel() != 0) n.backward(*this, id);
    }
  }
  for (const auto& name : params.names()) {
    auto it = parameter_nodes_.find(name);
    if (it != parameter_nodes_.end() && nodes_[it->second].grad.numel() != 0) {
      out.emplace(name, nodes_[it->second].grad);
    } else {
      out.emplace(name, Tensor(params.at(name).shape(), 0.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

std::string dims(const Tensor& t) { return shape_string(t.shape()); }

// C(m x n) += A(m x k) * B(k x n)
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C(m x n) += A(m x k) * B(n x k)^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
      C[i * n + j] += s;
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      double* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

template <class F>
Var unary_op(Var a, const char* op, F forward, double (*derivative)(double x, double y)) {
  const Tensor& x = a.value();
  Tensor y(x.shape(), 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = forward(x[i]);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(y), {a},
      [ia, derivative](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(ia);
        const Tensor& yv = t.value(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * derivative(xv[i], yv[i]);
      },
      op);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul " + dims(a) + " x " + dims(b));
  Tensor c(a.rows(), b.cols(), 0.0);
  gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  }
  return t;
}

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  require(k == B.rows(), "matmul " + dims(A) + " x " + dims(B));
  Tensor C(m, n, 0.0);
  gemm_nn(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(C), {a, b},
      [ia, ib, m, k, n](Tape& t, std::size_t self) {
        const double* g = t.grad(self).data().data();
        if (t.requires_grad(ia)) {
          gemm_nt(g, t.value(ib).data().data(), t.grad(ia).data().data(), m, n, k);
        }
        if (t.requires_grad(ib)) {
          gemm_tn(t.value(ia).data().data(), g, t.grad(ib).data().data(), m, k, n);
        }
      },
      "matmul");
}

Var matmul_bt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  require(k == B.cols(), "matmul_bt " + dims(A) + " x " + dims(B) + "^T");
  Tensor C(m, n, 0.0);
  gemm_nt(A.data().data(), B.data().data(), C.data().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(C), {a, b},
      [ia, ib, m, k, n](Tape& t, std::size_t self) {
        const double* g = t.grad(self).data().data();
        if (t.requires_grad(ia)) {
          gemm_nn(g, t.value(ib).data().data(), t.grad(ia).data().data(), m, n, k);
        }
        if (t.requires_grad(ib)) {
          gemm_tn(g, t.value(ia).data().data(), t.grad(ib).data().data(), m, n, k);
        }
      },
      "matmul_bt");
}

namespace {

Var elementwise2(Var a, Var b, const char* op, double sa, double sb) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.same_shape(B), std::string(op) + " " + dims(A) + " vs " + dims(B));
  Tensor C(A.shape(), 0.0);
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] = sa * A[i] + sb * B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(C), {a, b},
      [ia, ib, sa, sb](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad(ia);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += sa * g[i];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad(ib);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += sb * g[i];
        }
      },
      op);
}

}  // namespace

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.same_shape(B), "add " + dims(A) + " vs " + dims(B));
  Tensor C(A.shape(), 0.0);
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] = A[i] + B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(C), {a, b},
      [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t in : {ia, ib}) {
          if (!t.requires_grad(in)) continue;
          Tensor& gi = t.grad(in);
          for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
        }
      },
      "add");
}

Var sub(Var a, Var b) { return elementwise2(a, b, "sub", 1.0, -1.0); }

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.same_shape(B), "mul " + dims(A) + " vs " + dims(B));
  Tensor C(A.shape(), 0.0);
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] = A[i] * B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(C), {a, b},
      [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
          const Tensor& bv = t.value(ib);
          Tensor& ga = t.grad(ia);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
          const Tensor& av = t.value(ia);
          Tensor& gb = t.grad(ib);
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  require(R.rows() == 1 && R.cols() == A.cols(), "add_row " + dims(A) + " + " + dims(R));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C = A;
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) C(r, c) += R[c];
  }
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().record(
      std::move(C), {a, row},
      [ia, ir, m, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad(ia);
          for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(ir)) {
          Tensor& gr = t.grad(ir);
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) gr[c] += g(r, c);
          }
        }
      },
      "add_row");
}

Var scale(Var a, double s) {
  const Tensor& A = a.value();
  Tensor C(A.shape(), 0.0);
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] = s * A[i];
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(C), {a},
      [ia, s](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
      },
      "scale");
}

Var add_scalar(Var a, double s) {
  const Tensor& A = a.value();
  Tensor C(A.shape(), 0.0);
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] = A[i] + s;
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(C), {a},
      [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      },
      "add_scalar");
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols of nothing");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> offsets;
  std::size_t n = 0;
  for (const Var& p : parts) {
    require(p.value().rows() == m, "concat_cols row mismatch");
    offsets.push_back(n);
    n += p.value().cols();
  }
  Tensor C(m, n, 0.0);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(&P.data()[r * P.cols()], P.cols(), &C.data()[r * n + offsets[k]]);
    }
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      std::move(C), parts,
      [ids, offsets, m, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Tensor& gk = t.grad(ids[k]);
          const std::size_t w = gk.cols();
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < w; ++c) gk(r, c) += g(r, offsets[k] + c);
          }
        }
      },
      "concat_cols");
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const std::size_t n = parts[0].value().cols();
  std::size_t m = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    require(p.value().cols() == n, "concat_rows column mismatch");
    offsets.push_back(m);
    m += p.value().rows();
  }
  Tensor C(m, n, 0.0);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    std::copy(P.data().begin(), P.data().end(), C.data().begin() + offsets[k] * n);
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(
      std::move(C), parts,
      [ids, offsets, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Tensor& gk = t.grad(ids[k]);
          for (std::size_t i = 0; i < gk.numel(); ++i) gk[i] += g[offsets[k] * n + i];
        }
      },
      "concat_rows");
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require(start + count <= A.cols(), "slice_cols out of range on " + dims(A));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C(m, count, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < count; ++c) C(r, c) = A(r, start + c);
  }
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(C), {a},
      [ia, start, count, m, n](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < count; ++c) ga[r * n + start + c] += g(r, c);
        }
      },
      "slice_cols");
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require(start + count <= A.rows(), "slice_rows out of range on " + dims(A));
  const std::size_t n = A.cols();
  Tensor C(count, n, 0.0);
  std::copy_n(A.data().begin() + start * n, count * n, C.data().begin());
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(C), {a},
      [ia, start, n](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[start * n + i] += g[i];
      },
      "slice_rows");
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  const Tensor& E = table.value();
  const std::size_t n = E.cols();
  Tensor C(ids.size(), n, 0.0);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && static_cast<std::size_t>(ids[r]) < E.rows(),
            "embedding id " + std::to_string(ids[r]) + " out of range for " + dims(E));
    std::copy_n(E.data().begin() + ids[r] * n, n, C.data().begin() + r * n);
  }
  const std::size_t it = table.id();
  std::vector<int> rows(ids.begin(), ids.end());
  return table.tape().record(
      std::move(C), {table},
      [it, rows, n](Tape& t, std::size_t self) {
        if (!t.requires_grad(it)) return;
        const Tensor& g = t.grad(self);
        Tensor& ge = t.grad(it);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          for (std::size_t c = 0; c < n; ++c) ge[rows[r] * n + c] += g(r, c);
        }
      },
      "embedding_lookup");
}

Var relu(Var a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  return unary_op(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * x * x) * (M_2_SQRTPI * M_SQRT1_2 * 0.5);
        return cdf + x * pdf;
      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = x.value();
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  const std::size_t m = X.rows(), n = X.cols();
  require(G.rows() == 1 && G.cols() == n && B.same_shape(G), "layer_norm gain/bias shape");
  Tensor Y(m, n, 0.0);
  Tensor xhat(m, n, 0.0);
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += X(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (X(r, c) - mu) * (X(r, c) - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (X(r, c) - mu) * inv_std[r];
      Y(r, c) = xhat(r, c) * G[c] + B[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(Y), {x, gain, bias},
      [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                 std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& G = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad(ig);
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) gg[c] += g(r, c) * xhat(r, c);
          }
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad(ib);
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
          }
        }
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad(ix);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = g(r, c) * G[c];
              mean_d += d;
              mean_dx += d * xhat(r, c);
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = g(r, c) * G[c];
              gx(r, c) += inv_std[r] * (d - mean_d - xhat(r, c) * mean_dx);
            }
          }
        }
      },
      "layer_norm");
}

Var masked_softmax(Var logits, const Mask& mask) {
  const Tensor& X = logits.value();
  const std::size_t m = X.rows(), n = X.cols();
  require(mask.rows() == m && mask.cols() == n,
          "mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
              " does not match logits " + dims(X));
  Tensor P(m, n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < n; ++c) {
      if (mask(r, c)) {
        mx = std::max(mx, X(r, c));
        any = true;
      }
    }
    require(any, "softmax row " + std::to_string(r) + " has no allowed entry");
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (mask(r, c)) {
        P(r, c) = std::exp(X(r, c) - mx);
        total += P(r, c);
      }
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (mask(r, c)) P(r, c) /= total;
    }
  }
  const std::size_t ix = logits.id();
  return logits.tape().record(
      std::move(P), {logits},
      [ix, m, n](Tape& t, std::size_t self) {
        if (!t.requires_grad(ix)) return;
        const Tensor& g = t.grad(self);
        const Tensor& p = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < m; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < n; ++c) dot += p(r, c) * g(r, c);
          for (std::size_t c = 0; c < n; ++c) gx(r, c) += p(r, c) * (g(r, c) - dot);
        }
      },
      "masked_softmax");
}

Var softmax(Var logits) {
  return masked_softmax(logits, Mask(logits.value().rows(), logits.value().cols(), true));
}

Var log(Var a) {
  return unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var square(Var a) {
  return unary_op(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(
      Tensor::scalar(s), {a},
      [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const double g = t.grad(self)[0];
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
      },
      "sum");
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  require(n > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var minimum(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.same_shape(B), "minimum " + dims(A) + " vs " + dims(B));
  Tensor C(A.shape(), 0.0);
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] = B[i] < A[i] ? B[i] : A[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(C), {a, b},
      [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const bool pick_b = bv[i] < av[i];
          const std::size_t target = pick_b ? ib : ia;
          if (t.requires_grad(target)) t.grad(target)[i] += g[i];
        }
      },
      "minimum");
}

Var clamp(Var a, double lo, double hi) {
  const Tensor& A = a.value();
  Tensor C(A.shape(), 0.0);
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] = std::clamp(A[i], lo, hi);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(C), {a},
      [ia, lo, hi](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        const Tensor& av = t.value(ia);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (av[i] >= lo && av[i] <= hi) ga[i] += g[i];
        }
      },
      "clamp");
}

Var pick(Var a, std::span<const int> index) {
  const Tensor& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  require(index.size() == m, "pick index count does not match rows");
  Tensor C(m, 1, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    require(index[r] >= 0 && static_cast<std::size_t>(index[r]) < n, "pick index out of range");
    C[r] = A(r, index[r]);
  }
  const std::size_t ia = a.id();
  std::vector<int> idx(index.begin(), index.end());
  return a.tape().record(
      std::move(C), {a},
      [ia, idx](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t r = 0; r < idx.size(); ++r) ga(r, idx[r]) += g[r];
      },
      "pick");
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& A = a.value();
  require(rows * cols == A.numel(), "reshape " + dims(A) + " to " + std::to_string(rows) + "x" +
                                        std::to_string(cols));
  Tensor C(rows, cols, std::vector<double>(A.data().begin(), A.data().end()));
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(C), {a},
      [ia](Tape& t, std::size_t self) {
        if (!t.requires_grad(ia)) return;
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      },
      "reshape");
}

Var detach(Var a) { return a.tape().constant(a.value()); }

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(const LossBuilder& analytic_loss, const ScalarLoss& numeric_loss,
                           ParameterSet& params, const GradCheckOptions& options) {
  Gradients analytic;
  {
    Tape tape;
    Var loss = analytic_loss(tape, params);
    analytic = tape.backward(loss, params);
  }
  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& name : params.names()) {
    for (std::size_t i = 0; i < params.at(name).numel(); ++i) coords.emplace_back(name, i);
  }
  if (options.max_coords != 0 && options.max_coords < coords.size()) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform() * (coords.size() - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(options.max_coords);
  }
  GradCheckResult result;
  const double base = numeric_loss(params);
  if (!std::isfinite(base)) throw NumericError("non-finite loss at the probe point");
  for (const auto& [name, i] : coords) {
    Tensor& p = params.at(name);
    const double saved = p[i];
    p[i] = saved + options.epsilon;
    const double up = numeric_loss(params);
    p[i] = saved - options.epsilon;
    const double down = numeric_loss(params);
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite loss while probing " + name);
    }
    const double numeric = (up - down) / (2.0 * options.epsilon);
    const double a = analytic.at(name)[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    const double rel = std::abs(a - numeric) / denom;
    ++result.coords;
    if (result.coords == 1 || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = name;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

GradCheckResult grad_check(const LossBuilder& loss, ParameterSet& params,
                           const GradCheckOptions& options) {
  const ScalarLoss value = [&loss](const ParameterSet& p) {
    Tape tape(false);
    return loss(tape, p).value().item();
  };
  return grad_check(loss, value, params, options);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'T', 'D', 'M', 'A', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += width;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("truncated checkpoint");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t hash) {
  for (unsigned char b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void save_checkpoint(std::ostream& out, const ParameterSet& params, const std::string& metadata) {
  std::string buf(kMagic, sizeof kMagic);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(metadata.size()));
  buf += metadata;
  put_u32(buf, static_cast<std::uint32_t>(params.names().size()));
  for (const auto& name : params.names()) {
    const Tensor& t = params.at(name);
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<std::uint32_t>(params.group(name)));
    put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put_u64(buf, d);
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_u64(buf, bits);
    }
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(buf.data());
  put_u64(buf, fnv1a({raw, buf.size()}));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("failed to write checkpoint");
}

Checkpoint load_checkpoint(std::istream& in) {
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kMagic + 8 || bytes.compare(0, sizeof kMagic, kMagic, sizeof kMagic)) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - 8;
  {
    const std::string trailer = bytes.substr(body);
    Reader tail(trailer, 8);
    const std::uint64_t stored = tail.uint(8);
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    if (stored != fnv1a({raw, body})) throw CheckpointError("checkpoint checksum mismatch");
  }
  Reader r(bytes, body);
  r.str(sizeof kMagic);
  const auto version = r.uint(4);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.metadata = r.str(r.uint(4));
  const auto count = r.uint(4);
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.str(r.uint(4));
    const auto group = r.uint(4);
    if (group > 1) throw CheckpointError("bad parameter group for " + name);
    const auto rank = r.uint(4);
    std::vector<std::size_t> shape;
    std::size_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      shape.push_back(r.uint(8));
      numel *= shape.back();
    }
    if (numel > body) throw CheckpointError("implausible tensor size for " + name);
    Tensor t(shape, 0.0);
    for (std::size_t i = 0; i < numel; ++i) {
      const std::uint64_t bits = r.uint(8);
      std::memcpy(&t[i], &bits, sizeof bits);
    }
    ck.params.add(name, std::move(t), static_cast<Group>(group));
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes in checkpoint");
  return ck;
}

void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const std::string& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  save_checkpoint(out, params, metadata);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return load_checkpoint(in);
}

}  // namespace tdmat::ad
