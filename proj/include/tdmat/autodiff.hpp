#pragma once

// Dense row-major float64 matrices with a dynamic reverse-mode tape.
//
// Every differentiable op takes and returns `Var` handles owned by a
// `Tape`. The tape is rebuilt for each forward pass; `Tape::backward`
// walks nodes in reverse creation order, which is a valid reverse
// topological order, and accumulates gradients additively.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace tdmat::ad {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t numel() const noexcept { return data_.size(); }
  /// Rank-2 accessors; throw ShapeError for other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double item() const;

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }
  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// Attention mask: allowed(r, c) == true means position c is visible from r.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool allow = true)
      : rows_(rows), cols_(cols), allowed_(rows * cols, allow ? 1 : 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool operator()(std::size_t r, std::size_t c) const { return allowed_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool allow) { allowed_[r * cols_ + c] = allow ? 1 : 0; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> allowed_;
};

enum class Group : std::uint32_t { phi = 0, theta = 1 };

/// Named parameter tensors, each tagged with the loss group that owns it.
/// Iteration order is insertion order.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor value, Group group);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  Group group(const std::string& name) const;
  const std::vector<std::string>& names() const noexcept { return order_; }
  std::vector<std::string> names(Group g) const;
  std::size_t scalar_count() const;

 private:
  struct Entry {
    Tensor value;
    Group group;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> index_;
};

using Gradients = std::map<std::string, Tensor>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  /// With `record == false` only forward values are computed.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(Tensor value);
  /// Leaf referring to `params.at(name)`; `params` must outlive the tape.
  /// Repeated requests for the same name return the same node.
  Var parameter(const ParameterSet& params, const std::string& name);

  /// d loss / d param for every parameter in `params`; parameters that did
  /// not take part in the graph get zero tensors. Throws ShapeError unless
  /// `loss` holds exactly one element.
  Gradients backward(Var loss, const ParameterSet& params);

  // Op-author interface.
  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(std::size_t id);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
             const char* op);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward, const char* op);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::string parameter;
    BackwardFn backward;
  };
  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> parameter_nodes_;
};

// Matrix ops. Shapes are (rows x cols); violations throw ShapeError.
Var matmul(Var a, Var b);     // (m x k)(k x n)
Var matmul_bt(Var a, Var b);  // (m x k)(n x k)^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// a (m x n) + row (1 x n) broadcast over rows.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var slice_rows(Var a, std::size_t start, std::size_t count);
/// Row gather from an embedding table.
Var embedding_lookup(Var table, std::span<const int> ids);
Var relu(Var a);
/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
Var gelu(Var a);
/// Row-wise normalisation to zero mean / unit variance, then gain and bias
/// (both 1 x n).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Row-wise softmax over allowed entries; forbidden entries get exactly 0.
/// Throws ShapeError for a row without any allowed entry.
Var masked_softmax(Var logits, const Mask& mask);
Var softmax(Var logits);
Var log(Var a);
Var exp(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
Var minimum(Var a, Var b);
Var clamp(Var a, double lo, double hi);
/// out(r, 0) = a(r, index[r]).
Var pick(Var a, std::span<const int> index);
/// Same data viewed as (rows x cols).
Var reshape(Var a, std::size_t rows, std::size_t cols);
/// Copy of the value with no gradient path.
Var detach(Var a);

/// Plain tensor helpers shared by model code and tests.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// 0 means every coordinate; otherwise a seeded sample of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using LossBuilder = std::function<Var(Tape&, const ParameterSet&)>;
using ScalarLoss = std::function<double(const ParameterSet&)>;

/// Central differences of `numeric_loss` against the tape gradient of
/// `analytic_loss`. The two may differ when the analytic loss detaches
/// targets; `numeric_loss` must then hold those targets fixed.
GradCheckResult grad_check(const LossBuilder& analytic_loss, const ScalarLoss& numeric_loss,
                           ParameterSet& params, const GradCheckOptions& options = {});
GradCheckResult grad_check(const LossBuilder& loss, ParameterSet& params,
                           const GradCheckOptions& options = {});

/// Binary checkpoint (all integers little-endian):
///   "TDMATCKP" | u32 version=1 | u32 metadata_len | metadata bytes
///   | u32 count | count x { u32 name_len | name | u32 group | u32 rank
///   | rank x u64 dim | numel x f64 } | u64 FNV-1a of all preceding bytes
struct Checkpoint {
  ParameterSet params;
  std::string metadata;
};
void save_checkpoint(std::ostream& out, const ParameterSet& params, const std::string& metadata);
Checkpoint load_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const std::string& metadata);
Checkpoint load_checkpoint(const std::string& path);

std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                    std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace tdmat::ad
