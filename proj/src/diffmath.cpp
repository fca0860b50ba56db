#include "candtrack/diffmath.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace candtrack::dm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_eigen(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_eigen(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (t == nullptr) t = &v.tape();
    if (&v.tape() != t) throw std::invalid_argument("vars belong to different tapes");
  }
  return *t;
}

enum class Broadcast { Same, Row, Col, Scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return Broadcast::Same;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::Col;
  throw std::invalid_argument("cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

// Sums `g` (shaped like a) down to the shape of b under broadcast kind k.
Tensor reduce_to(const Tensor& g, const Tensor& b, Broadcast k) {
  switch (k) {
    case Broadcast::Same:
      return g;
    case Broadcast::Scalar: {
      Tensor out(b.shape(), {0.0});
      double s = 0.0;
      for (double v : g.data()) s += v;
      out[0] = s;
      return out;
    }
    case Broadcast::Row: {
      Tensor out(b.shape(), std::vector<double>(b.size(), 0.0));
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) out[c] += g(r, c);
      return out;
    }
    case Broadcast::Col: {
      Tensor out(b.shape(), std::vector<double>(b.size(), 0.0));
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) out[r] += g(r, c);
      return out;
    }
  }
  return g;
}

double broadcast_at(const Tensor& b, Broadcast k, std::size_t r, std::size_t c) {
  switch (k) {
    case Broadcast::Same: return b(r, c);
    case Broadcast::Row: return b[c];
    case Broadcast::Col: return b[r];
    case Broadcast::Scalar: return b[0];
  }
  return 0.0;
}

Tensor with_shape_of(const Tensor& like, std::vector<double> data) {
  return Tensor(like.shape(), std::move(data));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : shape_{rows, cols}, rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("tensor extents must be positive");
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty() || shape_.size() > 2) throw std::invalid_argument("tensor rank must be 1 or 2");
  for (std::size_t e : shape_)
    if (e == 0) throw std::invalid_argument("tensor extents must be positive");
  rows_ = shape_.size() == 1 ? 1 : shape_[0];
  cols_ = shape_.back();
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape");
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::vector(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::scalar(double v) { return Tensor(std::vector<std::size_t>{1}, std::vector<double>{v}); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw std::invalid_argument("item() on a non-scalar of shape " + shape_str(v));
  return v[0];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward fn) {
  bool needs = false;
  for (const Var& v : inputs) needs = needs || nodes_[v.id()].requires_grad;
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty()) {
    // Untouched nodes have an implicit zero gradient.
    auto& mut = const_cast<Node&>(n);
    mut.grad = with_shape_of(n.value, std::vector<double>(n.value.size(), 0.0));
  }
  return n.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (!n.value.same_shape(g)) {
    throw std::logic_error("gradient shape " + shape_str(g) + " does not match value " +
                           shape_str(n.value));
  }
  if (n.grad.empty()) {
    n.grad = with_shape_of(n.value, std::vector<double>(g.data().begin(), g.data().end()));
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var output) {
  if (output.value().size() != 1) {
    throw std::invalid_argument("backward needs a scalar output, got " + shape_str(output.value()));
  }
  for (auto& n : nodes_) n.grad = Tensor{};
  if (!nodes_[output.id()].requires_grad) return;
  nodes_[output.id()].grad = with_shape_of(output.value(), {1.0});
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul shape mismatch " + shape_str(av) + " * " + shape_str(bv));
  }
  Tensor out(av.rows(), bv.cols());
  as_eigen(out).noalias() = as_eigen(av) * as_eigen(bv);
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      Tensor ga(av.shape(), std::vector<double>(av.size()));
      as_eigen(ga).noalias() = as_eigen(g) * as_eigen(bv).transpose();
      tp.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb(bv.shape(), std::vector<double>(bv.size()));
      as_eigen(gb).noalias() = as_eigen(av).transpose() * as_eigen(g);
      tp.accumulate(b, gb);
    }
  });
}

Var transpose(Var a) {
  Tape& t = a.tape();
  const Tensor& av = a.value();
  Tensor out(av.cols(), av.rows());
  as_eigen(out) = as_eigen(av).transpose();
  const Var in[] = {a};
  return t.record(std::move(out), in, [a](Tape& tp, const Tensor& g) {
    Tensor ga(a.value().shape(), std::vector<double>(g.size()));
    as_eigen(ga) = as_eigen(g).transpose();
    tp.accumulate(a, ga);
  });
}

namespace {

Var add_signed(Var a, Var b, double sign) {
  Tape& t = tape_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast k = broadcast_kind(av, bv);
  Tensor out = av;
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) += sign * broadcast_at(bv, k, r, c);
  const Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b, k, sign](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    if (b.requires_grad()) {
      Tensor gb = reduce_to(g, b.value(), k);
      if (sign != 1.0)
        for (double& v : gb.data()) v *= sign;
      tp.accumulate(b, gb);
    }
  });
}

template <typename Fwd, typename Deriv>
Var elementwise(Var a, Fwd fwd, Deriv deriv) {
  Tape& t = a.tape();
  Tensor out = a.value();
  for (double& v : out.data()) v = fwd(v);
  const Tensor saved = out;
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, saved, deriv](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= deriv(x[i], saved[i]);
    tp.accumulate(a, ga);
  });
}

}  // namespace

Var add(Var a, Var b) { return add_signed(a, b, 1.0); }
Var sub(Var a, Var b) { return add_signed(a, b, -1.0); }

Var scale(Var a, double factor) {
  return elementwise(
      a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var relu(Var a) {
  return elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return elementwise(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_clamped(Var a, double floor) {
  return elementwise(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Var softmax_rows(Var a) {
  Tape& t = a.tape();
  const Tensor& av = a.value();
  Tensor out = av;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < av.cols(); ++c) m = std::max(m, av(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < av.cols(); ++c) s += (out(r, c) = std::exp(av(r, c) - m));
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) /= s;
  }
  const Tensor y = out;
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, y](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) = y(r, c) * (g(r, c) - dot);
    }
    tp.accumulate(a, ga);
  });
}

namespace {

// Log-sum-exp along rows (axis 1) or columns (axis 0). Backward routes the
// gradient through the softmax weights of each reduced slice.
Var logsumexp_axis(Var a, int axis) {
  Tape& t = a.tape();
  const Tensor& av = a.value();
  const std::size_t outer = axis == 1 ? av.rows() : av.cols();
  const std::size_t inner = axis == 1 ? av.cols() : av.rows();
  auto at = [&av, axis](std::size_t o, std::size_t i) { return axis == 1 ? av(o, i) : av(i, o); };

  Tensor out = axis == 1 ? Tensor(av.rows(), 1) : Tensor(1, av.cols());
  Tensor weights(av.rows(), av.cols());
  for (std::size_t o = 0; o < outer; ++o) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < inner; ++i) m = std::max(m, at(o, i));
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += std::exp(at(o, i) - m);
    const double lse = m + std::log(s);
    out[o] = lse;
    for (std::size_t i = 0; i < inner; ++i) {
      const double w = std::exp(at(o, i) - lse);
      if (axis == 1) weights(o, i) = w;
      else weights(i, o) = w;
    }
  }
  const Var in[] = {a};
  return t.record(std::move(out), in, [a, weights, axis](Tape& tp, const Tensor& g) {
    Tensor ga = weights;
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) *= axis == 1 ? g[r] : g[c];
    tp.accumulate(a, ga);
  });
}

}  // namespace

Var logsumexp_rows(Var a) { return logsumexp_axis(a, 1); }
Var logsumexp_cols(Var a) { return logsumexp_axis(a, 0); }

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
  Tape& t = parts.front().tape();
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols row mismatch");
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    off += v.cols();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [saved](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : saved) {
      const Tensor& v = p.value();
      if (p.requires_grad()) {
        Tensor gp(v.shape(), std::vector<double>(v.size()));
        for (std::size_t r = 0; r < v.rows(); ++r)
          for (std::size_t c = 0; c < v.cols(); ++c) gp(r, c) = g(r, off + c);
        tp.accumulate(p, gp);
      }
      off += v.cols();
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  Tape& t = parts.front().tape();
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows column mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> saved(parts.begin(), parts.end());
  return t.record(Tensor::matrix(rows, cols, std::move(data)), parts,
                  [saved](Tape& tp, const Tensor& g) {
                    std::size_t off = 0;
                    for (const Var& p : saved) {
                      const Tensor& v = p.value();
                      if (p.requires_grad()) {
                        auto src = g.data().subspan(off * v.cols(), v.size());
                        tp.accumulate(p, Tensor(v.shape(), std::vector<double>(src.begin(), src.end())));
                      }
                      off += v.rows();
                    }
                  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (count == 0 || begin + count > av.rows()) throw std::invalid_argument("slice_rows out of range");
  auto src = av.data().subspan(begin * av.cols(), count * av.cols());
  const Var in[] = {a};
  return a.tape().record(
      Tensor::matrix(count, av.cols(), std::vector<double>(src.begin(), src.end())), in,
      [a, begin](Tape& tp, const Tensor& g) {
        const Tensor& av = a.value();
        Tensor ga(av.shape(), std::vector<double>(av.size(), 0.0));
        std::copy(g.data().begin(), g.data().end(), ga.data().begin() + begin * av.cols());
        tp.accumulate(a, ga);
      });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (count == 0 || begin + count > av.cols()) throw std::invalid_argument("slice_cols out of range");
  Tensor out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
  const Var in[] = {a};
  return a.tape().record(std::move(out), in, [a, begin](Tape& tp, const Tensor& g) {
    const Tensor& av = a.value();
    Tensor ga(av.shape(), std::vector<double>(av.size(), 0.0));
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, begin + c) = g(r, c);
    tp.accumulate(a, ga);
  });
}

Var pick(Var a, std::size_t r, std::size_t c) {
  const Tensor& av = a.value();
  if (r >= av.rows() || c >= av.cols()) throw std::invalid_argument("pick index out of range");
  const Var in[] = {a};
  return a.tape().record(Tensor(1, 1, av(r, c)), in, [a, r, c](Tape& tp, const Tensor& g) {
    const Tensor& av = a.value();
    Tensor ga(av.shape(), std::vector<double>(av.size(), 0.0));
    ga(r, c) = g[0];
    tp.accumulate(a, ga);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const Var in[] = {a};
  return a.tape().record(Tensor(1, 1, s), in, [a](Tape& tp, const Tensor& g) {
    const Tensor& av = a.value();
    tp.accumulate(a, Tensor(av.shape(), std::vector<double>(av.size(), g[0])));
  });
}

Var augment_border(Var a, Var fill) {
  Tape& t = tape_of({a, fill});
  const Tensor& av = a.value();
  if (fill.value().size() != 1) throw std::invalid_argument("augment_border fill must be scalar");
  const double f = fill.value()[0];
  Tensor out(av.rows() + 1, av.cols() + 1, f);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = av(r, c);
  const Var in[] = {a, fill};
  return t.record(std::move(out), in, [a, fill](Tape& tp, const Tensor& g) {
    const Tensor& av = a.value();
    if (a.requires_grad()) {
      Tensor ga(av.shape(), std::vector<double>(av.size()));
      for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < av.cols(); ++c) ga(r, c) = g(r, c);
      tp.accumulate(a, ga);
    }
    if (fill.requires_grad()) {
      double s = 0.0;
      for (std::size_t c = 0; c <= av.cols(); ++c) s += g(av.rows(), c);
      for (std::size_t r = 0; r < av.rows(); ++r) s += g(r, av.cols());
      tp.accumulate(fill, Tensor(fill.value().shape(), {s}));
    }
  });
}

Var batchnorm(Var x, Var gamma, Var beta, const BatchNormState& state, Mode mode) {
  Tape& t = tape_of({x, gamma, beta});
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows();
  const std::size_t q = xv.cols();
  if (gamma.value().size() != q || beta.value().size() != q) {
    throw std::invalid_argument("batchnorm parameter width mismatch");
  }
  if (state.running_mean == nullptr || state.running_var == nullptr ||
      state.running_mean->size() != q || state.running_var->size() != q) {
    throw std::invalid_argument("batchnorm running statistics missing or mis-sized");
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();

  Tensor xhat(n, q);
  Tensor inv_std(1, q);
  if (mode == Mode::Train) {
    if (n < 2) throw std::invalid_argument("batchnorm in train mode needs at least 2 rows");
    for (std::size_t c = 0; c < q; ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < n; ++r) mean += xv(r, c);
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t r = 0; r < n; ++r) var += (xv(r, c) - mean) * (xv(r, c) - mean);
      var /= static_cast<double>(n);
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      for (std::size_t r = 0; r < n; ++r) xhat(r, c) = (xv(r, c) - mean) * inv_std[c];
      Tensor& rm = *state.running_mean;
      Tensor& rv = *state.running_var;
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * mean;
      rv[c] = (1.0 - state.momentum) * rv[c] +
              state.momentum * var * static_cast<double>(n) / static_cast<double>(n - 1);
    }
  } else {
    const Tensor& rm = *state.running_mean;
    const Tensor& rv = *state.running_var;
    for (std::size_t c = 0; c < q; ++c) {
      inv_std[c] = 1.0 / std::sqrt(rv[c] + state.eps);
      for (std::size_t r = 0; r < n; ++r) xhat(r, c) = (xv(r, c) - rm[c]) * inv_std[c];
    }
  }

  Tensor out(n, q);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < q; ++c) out(r, c) = gv[c] * xhat(r, c) + bv[c];

  const Var in[] = {x, gamma, beta};
  return t.record(std::move(out), in, [x, gamma, beta, xhat, inv_std, mode](Tape& tp, const Tensor& g) {
    const std::size_t n = xhat.rows();
    const std::size_t q = xhat.cols();
    const Tensor& gv = gamma.value();
    if (gamma.requires_grad() || beta.requires_grad()) {
      std::vector<double> dg(q, 0.0), db(q, 0.0);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < q; ++c) {
          dg[c] += g(r, c) * xhat(r, c);
          db[c] += g(r, c);
        }
      tp.accumulate(gamma, Tensor(gamma.value().shape(), std::move(dg)));
      tp.accumulate(beta, Tensor(beta.value().shape(), std::move(db)));
    }
    if (!x.requires_grad()) return;
    Tensor gx(n, q);
    if (mode == Mode::Infer) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < q; ++c) gx(r, c) = g(r, c) * gv[c] * inv_std[c];
    } else {
      const double nn = static_cast<double>(n);
      for (std::size_t c = 0; c < q; ++c) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double d = g(r, c) * gv[c];
          sum_d += d;
          sum_dx += d * xhat(r, c);
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double d = g(r, c) * gv[c];
          gx(r, c) = inv_std[c] / nn * (nn * d - sum_d - xhat(r, c) * sum_dx);
        }
      }
    }
    tp.accumulate(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Composites

Var linear(Var x, Var w, Var b) {
  if (x.cols() != w.rows() || b.value().size() != w.cols()) {
    throw std::invalid_argument("linear shape mismatch: x " + shape_str(x.value()) + ", w " +
                                shape_str(w.value()) + ", b " + shape_str(b.value()));
  }
  return add(matmul(x, w), b);
}

Var multi_head_attention(Var query_set, Var key_value_set, const AttentionWeights& w,
                         std::size_t heads, std::vector<Var>* probabilities) {
  const std::size_t dim = query_set.cols();
  if (key_value_set.rows() == 0) throw std::invalid_argument("attention needs at least one key");
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("model dim not divisible by heads");
  if (key_value_set.cols() != dim) throw std::invalid_argument("query/key width mismatch");

  const Var q = linear(query_set, w.wq, w.bq);
  const Var k = linear(key_value_set, w.wk, w.bk);
  const Var v = linear(key_value_set, w.wv, w.bv);
  const std::size_t head_dim = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  std::vector<Var> outs;
  outs.reserve(heads);
  if (probabilities != nullptr) probabilities->clear();
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = slice_cols(q, h * head_dim, head_dim);
    const Var kh = slice_cols(k, h * head_dim, head_dim);
    const Var vh = slice_cols(v, h * head_dim, head_dim);
    const Var prob = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    if (probabilities != nullptr) probabilities->push_back(prob);
    outs.push_back(matmul(prob, vh));
  }
  return linear(concat_cols(outs), w.wo, w.bo);
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check(const ScalarFunction& f, std::span<Tensor* const> leaves, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check step must be positive");

  auto evaluate = [&](Tape& tape) {
    std::vector<Var> vars;
    vars.reserve(leaves.size());
    for (Tensor* l : leaves) vars.push_back(tape.leaf(*l, true));
    Var out = f(tape, vars);
    if (out.value().size() != 1) throw std::invalid_argument("grad_check needs a scalar-valued function");
    return std::pair{out, vars};
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    auto [out, vars] = evaluate(tape);
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(v.grad());
  }

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = *leaves[li];
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const double orig = leaf[i];
      leaf[i] = orig + step;
      double plus, minus;
      {
        Tape tape;
        plus = evaluate(tape).first.item();
      }
      leaf[i] = orig - step;
      {
        Tape tape;
        minus = evaluate(tape).first.item();
      }
      leaf[i] = orig;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[li][i];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.entries;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_leaf = li;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace candtrack::dm
