#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every primitive evaluated on it together with a closure that
// propagates the output gradient to the inputs. Values are computed eagerly;
// `Tape::backward` replays the closures in reverse order. Rank-1 tensors of
// shape [n] behave as 1×n row vectors.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace candtrack::dm {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  // shape must have rank 1 or 2 with positive extents.
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor vector(std::vector<double> data);
  static Tensor scalar(double v);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records a primitive output. `fn` is dropped when no input requires grad.
  Var record(Tensor value, std::span<const Var> inputs, Backward fn);

  // Seeds d(output)/d(output) = 1 and propagates. `output` must be 1×1.
  void backward(Var output);

  void accumulate(const Var& v, const Tensor& g);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Primitives.
Var matmul(Var a, Var b);
Var transpose(Var a);
// Broadcasting: b has a's shape, or is 1×cols, rows×1 or 1×1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var exp(Var a);
// log(max(a, floor)); entries at or below the floor get zero gradient.
Var log_clamped(Var a, double floor);
Var softmax_rows(Var a);
Var logsumexp_rows(Var a);  // rows×1
Var logsumexp_cols(Var a);  // 1×cols
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var pick(Var a, std::size_t r, std::size_t c);
Var sum(Var a);
// Appends one row and one column, every new entry equal to the scalar `fill`.
Var augment_border(Var a, Var fill);

enum class Mode { Train, Infer };

struct BatchNormState {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-column normalization. Train mode uses batch statistics (biased variance)
// and updates the running statistics (unbiased variance); infer mode uses the
// running statistics.
Var batchnorm(Var x, Var gamma, Var beta, const BatchNormState& state, Mode mode);

// Composites.
Var linear(Var x, Var w, Var b);

struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product attention with `heads` heads. When `probabilities` is
// non-null it receives the per-head softmax matrices (queries × keys).
Var multi_head_attention(Var query_set, Var key_value_set, const AttentionWeights& w,
                         std::size_t heads, std::vector<Var>* probabilities = nullptr);

// Central-difference check of every entry of `leaves`. `f` must build a scalar
// from leaf Vars created on the tape it receives. Returns
// max |analytic - numeric| / max(1, |analytic|, |numeric|).
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
};

GradCheckReport grad_check(const ScalarFunction& f, std::span<Tensor* const> leaves,
                           double step = 1e-4);

}  // namespace candtrack::dm
