#pragma once

// Dense double-precision tensors with a reverse-mode gradient tape and a
// central finite-difference oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rarl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  DomainError(const std::string& what, std::size_t index) : Error(what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// 64-bit FNV-1a, used for checksums and branch signatures.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

class Tensor {
 public:
  bool requires_grad = false;

  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  // Rank-0 and rank-1 tensors behave as a single row.
  std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    return 1;
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const {
    if (!is_scalar()) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  std::uint64_t checksum() const {
    auto h = fnv1a(shape_.data(), shape_.size() * sizeof(std::size_t));
    return fnv1a(data_.data(), data_.size() * sizeof(double), h);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A named trainable value that lives outside any tape.
struct Parameter {
  std::string name;
  Tensor value;
  bool decay = true;  // subject to weight decay
};

class Tape;

class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  double item() const { return value().item(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct ParamGrad {
  Parameter* param;
  Tensor grad;
};
using GradMap = std::vector<ParamGrad>;

inline const Tensor* find_grad(const GradMap& g, const Parameter& p) {
  for (const auto& pg : g)
    if (pg.param == &p) return &pg.grad;
  return nullptr;
}

class BackwardContext;

class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) {
    v.requires_grad = false;
    return push(std::move(v), {}, nullptr, false, nullptr);
  }
  // Leaf honouring the tensor's own requires_grad flag.
  Var leaf(Tensor v) {
    const bool rg = v.requires_grad;
    return push(std::move(v), {}, nullptr, rg, nullptr);
  }
  // Tracked parameter; registering the same parameter twice returns one node.
  Var param(Parameter& p) {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].param == &p) return Var(this, i);
    return push(p.value, {}, nullptr, true, &p);
  }

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
    bool rg = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.tape_ != this) throw TapeError("operand recorded on a different tape");
      ids.push_back(v.id_);
      rg = rg || nodes_[v.id_].requires_grad;
    }
    return push(std::move(value), std::move(ids), rg ? std::move(fn) : nullptr, rg, nullptr);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id_).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Gradient of the last backward pass w.r.t. v; null when never materialized.
  const Tensor* grad(Var v) const {
    if (!consumed_ || v.id_ >= grads_.size() || !has_grad_[v.id_]) return nullptr;
    return &grads_[v.id_];
  }

  GradMap backward(Var loss);

  // Branch signatures let the finite-difference oracle detect kink crossings.
  void track_branches(bool on) noexcept { track_branches_ = on; }
  bool tracking_branches() const noexcept { return track_branches_; }
  void note_branch(std::uint64_t code) noexcept {
    branch_sig_ = fnv1a(&code, sizeof(code), branch_sig_);
  }
  std::uint64_t branch_signature() const noexcept { return branch_sig_; }

  void note_saturation(std::size_t n) noexcept { saturation_ += n; }
  std::size_t saturation_events() const noexcept { return saturation_; }

 private:
  friend class BackwardContext;
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
    Parameter* param;
  };

  Var push(Tensor v, std::vector<std::size_t> inputs, BackwardFn fn, bool rg, Parameter* p) {
    nodes_.push_back(Node{std::move(v), std::move(inputs), std::move(fn), rg, p});
    return Var(this, nodes_.size() - 1);
  }

  Tensor* grad_slot(std::size_t id) {
    if (!nodes_[id].requires_grad) return nullptr;
    if (!has_grad_[id]) {
      grads_[id] = Tensor::zeros_like(nodes_[id].value);
      has_grad_[id] = true;
    }
    return &grads_[id];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> has_grad_;
  bool consumed_ = false;
  bool track_branches_ = false;
  std::uint64_t branch_sig_ = 14695981039346656037ull;
  std::size_t saturation_ = 0;
};

class BackwardContext {
 public:
  const Tensor& out_grad() const { return *out_grad_; }
  const Tensor& out() const { return tape_->nodes_[node_].value; }
  const Tensor& in(std::size_t k) const { return tape_->nodes_[tape_->nodes_[node_].inputs[k]].value; }
  // Null for inputs that do not require a gradient.
  Tensor* in_grad(std::size_t k) { return tape_->grad_slot(tape_->nodes_[node_].inputs[k]); }

 private:
  friend class Tape;
  BackwardContext(Tape* t, std::size_t node, const Tensor* g) : tape_(t), node_(node), out_grad_(g) {}
  Tape* tape_;
  std::size_t node_;
  const Tensor* out_grad_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

inline GradMap Tape::backward(Var loss) {
  if (consumed_) throw TapeError("tape already consumed by a previous backward pass");
  if (loss.tape_ != this) throw TapeError("loss belongs to a different tape");
  if (!nodes_[loss.id_].value.is_scalar())
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_str(nodes_[loss.id_].value.shape()));
  consumed_ = true;
  grads_.assign(nodes_.size(), Tensor{});
  has_grad_.assign(nodes_.size(), false);
  GradMap out;
  if (!nodes_[loss.id_].requires_grad) return out;
  grads_[loss.id_] = Tensor(nodes_[loss.id_].value.shape(), 1.0);
  has_grad_[loss.id_] = true;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    if (!has_grad_[i] || !nodes_[i].backward) continue;
    // grads_ is never resized during the sweep, so the reference stays valid.
    BackwardContext ctx(this, i, &grads_[i]);
    nodes_[i].backward(ctx);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].param && has_grad_[i]) out.push_back(ParamGrad{nodes_[i].param, grads_[i]});
  return out;
}

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw TapeError("operands recorded on different tapes");
}

// Same shape, or one operand holds a single value that is broadcast.
inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.is_scalar()) return a.shape();
  if (a.is_scalar()) return b.shape();
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() > 2) throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_str(t.shape()));
}

template <class Fwd, class DA, class DB>
Var binary(Var a, Var b, const char* op, Fwd fwd, DA da, DB db) {
  require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shape(x, y, op));
  const bool xs = x.numel() == 1 && out.numel() != 1;
  const bool ys = y.numel() == 1 && out.numel() != 1;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(x[xs ? 0 : i], y[ys ? 0 : i], i);
  return a.tape().record(std::move(out), {a, b}, [xs, ys, da, db](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    const Tensor& x = c.in(0);
    const Tensor& y = c.in(1);
    const Tensor& o = c.out();
    if (Tensor* gx = c.in_grad(0))
      for (std::size_t i = 0; i < g.numel(); ++i)
        (*gx)[xs ? 0 : i] += g[i] * da(x[xs ? 0 : i], y[ys ? 0 : i], o[i]);
    if (Tensor* gy = c.in_grad(1))
      for (std::size_t i = 0; i < g.numel(); ++i)
        (*gy)[ys ? 0 : i] += g[i] * db(x[xs ? 0 : i], y[ys ? 0 : i], o[i]);
  });
}

template <class Fwd, class D>
Var unary(Var a, Fwd fwd, D d) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i], i);
  return a.tape().record(std::move(out), {a}, [d](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0)) {
      const Tensor& g = c.out_grad();
      const Tensor& x = c.in(0);
      const Tensor& o = c.out();
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * d(x[i], o[i]);
    }
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, "add", [](double x, double y, std::size_t) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      a, b, "sub", [](double x, double y, std::size_t) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      a, b, "mul", [](double x, double y, std::size_t) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary(
      a, b, "div",
      [](double x, double y, std::size_t i) {
        if (y == 0.0) throw DomainError("div: zero divisor at index " + std::to_string(i), i);
        return x / y;
      },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Var scale(Var a, double s) {
  return detail::unary(
      a, [s](double x, std::size_t) { return s * x; }, [s](double, double) { return s; });
}

inline Var shift(Var a, double s) {
  return detail::unary(
      a, [s](double x, std::size_t) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var exp(Var a) {
  return detail::unary(
      a, [](double x, std::size_t) { return std::exp(x); }, [](double, double o) { return o; });
}

inline Var log(Var a) {
  return detail::unary(
      a,
      [](double x, std::size_t i) {
        if (!(x > 0.0))
          throw DomainError("log: non-positive value " + std::to_string(x) + " at index " +
                                std::to_string(i),
                            i);
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Var a) {
  return detail::unary(
      a,
      [](double x, std::size_t i) {
        if (x < 0.0) throw DomainError("sqrt: negative value at index " + std::to_string(i), i);
        return std::sqrt(x);
      },
      [](double, double o) { return 0.5 / o; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x, std::size_t) { return detail::stable_sigmoid(x); },
      [](double, double o) { return o * (1.0 - o); });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x, std::size_t) { return std::tanh(x); },
      [](double, double o) { return 1.0 - o * o; });
}

inline Var relu(Var a) {
  Tape& t = a.tape();
  if (t.tracking_branches()) {
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < x.numel(); ++i) t.note_branch(x[i] > 0.0 ? 1 : 0);
  }
  return detail::unary(
      a, [](double x, std::size_t) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Gradient passes only strictly inside (lo, hi).
inline Var clamp(Var a, double lo, double hi) {
  Tape& t = a.tape();
  if (t.tracking_branches()) {
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < x.numel(); ++i) t.note_branch(x[i] < lo ? 0 : (x[i] > hi ? 2 : 1));
  }
  return detail::unary(
      a, [lo, hi](double x, std::size_t) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// Applies f only where mask is set; other entries pass through unchanged.
template <class Fwd, class D>
Var apply_where(Var a, const std::vector<bool>& mask, Fwd fwd, D d) {
  const Tensor& x = a.value();
  if (mask.size() != x.numel())
    throw ShapeError("apply_where: mask of " + std::to_string(mask.size()) + " for " + std::to_string(x.numel()) + " entries");
  Tensor out = x;
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (mask[i]) out[i] = fwd(x[i]);
  return a.tape().record(std::move(out), {a}, [mask, d](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0)) {
      const Tensor& g = c.out_grad();
      const Tensor& x = c.in(0);
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += mask[i] ? g[i] * d(x[i]) : g[i];
    }
  });
}

inline Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0)) {
      const double g = c.out_grad()[0];
      for (double& v : gx->data()) v += g;
    }
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::require_matrix(x, "matmul");
  detail::require_matrix(y, "matmul");
  const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
  if (y.rows() != k)
    throw ShapeError("matmul: inner extents differ " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += xv * y[p * m + j];
    }
  return a.tape().record(std::move(out), {a, b}, [n, k, m](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    if (Tensor* gx = c.in_grad(0)) {
      const Tensor& y = c.in(1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y[p * m + j];
          (*gx)[i * k + p] += s;
        }
    }
    if (Tensor* gy = c.in_grad(1)) {
      const Tensor& x = c.in(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          if (xv == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) (*gy)[p * m + j] += xv * g[i * m + j];
        }
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "transpose");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x[i * m + j];
  return a.tape().record(std::move(out), {a}, [n, m](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0)) {
      const Tensor& g = c.out_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[j * n + i];
    }
  });
}

// a (n x m) plus a length-m row vector b on every row.
inline Var add_rowvec(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& v = b.value();
  detail::require_matrix(x, "add_rowvec");
  const std::size_t n = x.rows(), m = x.cols();
  if (v.numel() != m)
    throw ShapeError("add_rowvec: row vector of " + std::to_string(v.numel()) + " for " + std::to_string(m) + " columns");
  Tensor out = x;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += v[j];
  return a.tape().record(std::move(out), {a, b}, [n, m](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    if (Tensor* gx = c.in_grad(0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
    if (Tensor* gv = c.in_grad(1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gv)[j] += g[i * m + j];
  });
}

// Inner product of two equally-shaped tensors.
inline Var inner(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape())
    throw ShapeError("inner: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i] * y[i];
  return a.tape().record(Tensor::scalar(s), {a, b}, [](BackwardContext& c) {
    const double g = c.out_grad()[0];
    if (Tensor* gx = c.in_grad(0))
      for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g * c.in(1)[i];
    if (Tensor* gy = c.in_grad(1))
      for (std::size_t i = 0; i < gy->numel(); ++i) (*gy)[i] += g * c.in(0)[i];
  });
}

// Row-wise inner products: shape {rows}.
inline Var row_dot(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape())
    throw ShapeError("row_dot: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  detail::require_matrix(x, "row_dot");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += x[i * m + j] * y[i * m + j];
  return a.tape().record(std::move(out), {a, b}, [n, m](BackwardContext& c) {
    const Tensor& g = c.out_grad();
    if (Tensor* gx = c.in_grad(0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += g[i] * c.in(1)[i * m + j];
    if (Tensor* gy = c.in_grad(1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gy)[i * m + j] += g[i] * c.in(0)[i * m + j];
  });
}

// Row-wise L2 norms: shape {rows}.
inline Var l2_norm_rows(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "l2_norm_rows");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += x[i * m + j] * x[i * m + j];
    out[i] = std::sqrt(s);
  }
  return a.tape().record(std::move(out), {a}, [n, m](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0)) {
      const Tensor& x = c.in(0);
      for (std::size_t i = 0; i < n; ++i) {
        const double nrm = c.out()[i];
        if (nrm == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) (*gx)[i * m + j] += c.out_grad()[i] * x[i * m + j] / nrm;
      }
    }
  });
}

// Each row divided by its L2 norm. A zero row is a domain error naming the row.
inline Var l2_normalize_rows(Var a) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "l2_normalize_rows");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out(x.shape());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += x[i * m + j] * x[i * m + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > 0.0)) throw DomainError("l2_normalize: zero-norm row " + std::to_string(i), i);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x[i * m + j] / norms[i];
  }
  return a.tape().record(std::move(out), {a}, [n, m, norms](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0)) {
      const Tensor& g = c.out_grad();
      const Tensor& u = c.out();
      for (std::size_t i = 0; i < n; ++i) {
        double gu = 0.0;
        for (std::size_t j = 0; j < m; ++j) gu += g[i * m + j] * u[i * m + j];
        for (std::size_t j = 0; j < m; ++j)
          (*gx)[i * m + j] += (g[i * m + j] - gu * u[i * m + j]) / norms[i];
      }
    }
  });
}

// Row-wise log-softmax restricted to `columns`; output is rows x |columns|,
// column k corresponding to columns[k]. Columns outside the set take no part.
inline Var log_softmax_masked(Var a, const std::vector<std::size_t>& columns) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "log_softmax_masked");
  const std::size_t n = x.rows(), m = x.cols(), s = columns.size();
  if (s == 0) throw ShapeError("log_softmax_masked: empty index set");
  for (std::size_t c : columns)
    if (c >= m) throw ShapeError("log_softmax_masked: column " + std::to_string(c) + " out of range");
  Tensor out(Shape{n, s});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c : columns) mx = std::max(mx, x[i * m + c]);
    double z = 0.0;
    for (std::size_t c : columns) z += std::exp(x[i * m + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < s; ++k) out[i * s + k] = x[i * m + columns[k]] - lse;
  }
  return a.tape().record(std::move(out), {a}, [n, m, s, columns](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0)) {
      const Tensor& g = c.out_grad();
      const Tensor& o = c.out();
      for (std::size_t i = 0; i < n; ++i) {
        double gs = 0.0;
        for (std::size_t k = 0; k < s; ++k) gs += g[i * s + k];
        for (std::size_t k = 0; k < s; ++k)
          (*gx)[i * m + columns[k]] += g[i * s + k] - std::exp(o[i * s + k]) * gs;
      }
    }
  });
}

inline Var softmax_masked(Var a, const std::vector<std::size_t>& columns) {
  return exp(log_softmax_masked(a, columns));
}

inline std::vector<std::size_t> all_columns(std::size_t m) {
  std::vector<std::size_t> c(m);
  std::iota(c.begin(), c.end(), std::size_t{0});
  return c;
}

// out[i] = a[i, index[i]]; shape {rows}.
inline Var pick(Var a, const std::vector<std::size_t>& index) {
  const Tensor& x = a.value();
  detail::require_matrix(x, "pick");
  const std::size_t n = x.rows(), m = x.cols();
  if (index.size() != n)
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " + std::to_string(n) + " rows");
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= m) throw ShapeError("pick: column " + std::to_string(index[i]) + " out of range");
    out[i] = x[i * m + index[i]];
  }
  return a.tape().record(std::move(out), {a}, [m, index](BackwardContext& c) {
    if (Tensor* gx = c.in_grad(0))
      for (std::size_t i = 0; i < index.size(); ++i) (*gx)[i * m + index[i]] += c.out_grad()[i];
  });
}

// Vertical concatenation; rank-1 parts count as one row each.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t m = parts.front().value().cols();
  std::size_t n = 0;
  for (const Var& p : parts) {
    detail::require_same_tape(parts.front(), p);
    detail::require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != m) throw ShapeError("concat_rows: column count mismatch");
    n += p.value().rows();
  }
  Tensor out(Shape{n, m});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += v.numel();
  }
  return parts.front().tape().record(std::move(out), parts, [](BackwardContext& c) {
    std::size_t off = 0;
    for (std::size_t k = 0;; ++k) {
      if (off >= c.out_grad().numel()) break;
      const std::size_t len = c.in(k).numel();
      if (Tensor* g = c.in_grad(k))
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += c.out_grad()[off + i];
      off += len;
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool excluded = false;  // a perturbation crossed a non-smooth point
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarGraph = std::function<Var(Tape&)>;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// Compares tape gradients of `f` with central differences over every
// coordinate of `params`. `f` must register the parameters via Tape::param.
inline FdReport finite_diff_check(const ScalarGraph& f, std::span<Parameter* const> params, double h = 1e-4) {
  if (!(h > 0.0)) throw Error("finite_diff_check: step must be positive");
  FdReport rep;
  Tape base;
  base.track_branches(true);
  Var loss = f(base);
  if (!std::isfinite(loss.item())) throw DomainError("finite_diff_check: non-finite value at base point", 0);
  const std::uint64_t sig = base.branch_signature();
  const GradMap grads = base.backward(loss);

  auto eval = [&](Parameter& p, std::size_t j, double delta) {
    const double saved = p.value[j];
    p.value[j] = saved + delta;
    Tape t;
    t.track_branches(true);
    double v;
    std::uint64_t s;
    try {
      v = f(t).item();
      s = t.branch_signature();
    } catch (...) {
      p.value[j] = saved;
      throw;
    }
    p.value[j] = saved;
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "finite_diff_check: non-finite value when perturbing " << p.name << "[" << j << "] by " << delta;
      throw DomainError(os.str(), j);
    }
    return std::pair{v, s};
  };

  for (Parameter* p : params) {
    const Tensor* g = find_grad(grads, *p);
    for (std::size_t j = 0; j < p->value.numel(); ++j) {
      const auto [fp, sp] = eval(*p, j, h);
      const auto [fm, sm] = eval(*p, j, -h);
      if (sp != sig || sm != sig) {
        rep.excluded = true;
        return rep;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = g ? (*g)[j] : 0.0;
      const double err = relative_error(analytic, numeric);
      ++rep.checked;
      if (err >= rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_param = p->name;
        rep.worst_index = j;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace rarl
