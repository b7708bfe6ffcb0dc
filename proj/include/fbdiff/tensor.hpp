#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "fbdiff/common.hpp"
#include "fbdiff/rng.hpp"
#include "fbdiff/threading.hpp"

namespace fbdiff {

template <typename T>
class Tape;

/// Dense row-major tensor. Copies share the underlying buffer; graph ops
/// never mutate their inputs, so shared buffers behave like values. Only
/// optimizer updates write through an existing tensor, between tapes.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(numel_of(shape_), T(0))) {}

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.vals().begin(), t.vals().end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    require(numel_of(shape) == static_cast<int64_t>(values.size()), ErrorCode::ShapeMismatch,
            "value count does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::vector<T>& vals() { return *data_; }
  const std::vector<T>& vals() const { return *data_; }
  T* ptr() { return data_->data(); }
  const T* ptr() const { return data_->data(); }
  T item() const {
    require(numel() == 1, ErrorCode::ShapeMismatch, "item() requires a scalar tensor");
    return (*data_)[0];
  }

  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape<T>* tape() const { return tape_; }

  /// Internal: links this tensor to a tape node. Called by ops and watch().
  void attach(Tape<T>* tape, int node) {
    tape_ = tape;
    node_ = node;
    requires_grad = true;
  }

  /// Returns a copy holding the same buffer but no tape link.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  /// Deep copy of the buffer (no tape link).
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_->size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>::from(shape_, std::move(out));
  }

  void fill_uniform(Rng& rng, T lo, T hi) {
    for (auto& v : *data_) v = static_cast<T>(rng.next_uniform(lo, hi));
  }
  void fill_gaussian(Rng& rng, T mean = T(0), T stddev = T(1)) {
    for (auto& v : *data_) v = static_cast<T>(mean + stddev * rng.next_gaussian());
  }

  bool requires_grad = false;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

/// Reverse-mode tape. Nodes are appended in execution order, so parents
/// always precede children and one reverse sweep visits each node once.
/// Gradient accumulation order is the tape order, which keeps runs
/// reproducible. A tape can run backward exactly once.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape<T>&, const std::vector<T>&)>;

  /// Registers a leaf (parameter or input) for gradient tracking.
  int watch(Tensor<T>& t) {
    require(!t.tracked(), ErrorCode::InvalidArgument, "tensor is already on a tape");
    const int id = record(t.numel(), nullptr);
    t.attach(this, id);
    return id;
  }

  int record(int64_t numel, BackwardFn back) {
    nodes_.push_back(Node{numel, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Gradient buffer of a node, zero-allocated on first access.
  std::vector<T>& grad_buf(int node) {
    auto& buf = grads_[node];
    if (buf.empty()) buf.assign(nodes_[node].numel, T(0));
    return buf;
  }

  void backward(const Tensor<T>& loss) {
    require(loss.tape() == this && loss.tracked(), ErrorCode::InvalidArgument,
            "backward: loss is detached from this tape");
    require(loss.numel() == 1, ErrorCode::InvalidArgument, "backward: loss must be a scalar");
    require(!consumed_, ErrorCode::InvalidArgument,
            "backward: tape already replayed; record a fresh tape instead of double-accumulating");
    consumed_ = true;
    grads_.assign(nodes_.size(), {});
    grads_[loss.node()] = {T(1)};
    for (int i = loss.node(); i >= 0; --i) {
      if (grads_[i].empty()) continue;
      if (nodes_[i].back) {
        nodes_[i].back(*this, grads_[i]);
        grads_[i] = {};  // interior buffers are dead after their pullback runs
      }
    }
  }

  bool has_grad(const Tensor<T>& t) const {
    return t.tape() == this && t.tracked() && t.node() < static_cast<int>(grads_.size()) &&
           !grads_[t.node()].empty();
  }

  Tensor<T> grad(const Tensor<T>& t) const {
    require(has_grad(t), ErrorCode::InvalidArgument, "no gradient recorded for tensor");
    return Tensor<T>::from(t.shape(), grads_[t.node()]);
  }

  /// Gradient values for a watched leaf, zeros if the loss never reached it.
  std::vector<T> grad_or_zero(const Tensor<T>& t) const {
    if (has_grad(t)) return grads_[t.node()];
    return std::vector<T>(t.numel(), T(0));
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    int64_t numel;
    BackwardFn back;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
Tape<T>* merge_tapes(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.tracked() && b.tracked()) {
    require(a.tape() == b.tape(), ErrorCode::InvalidArgument,
            "operands live on different tapes");
    return a.tape();
  }
  if (a.tracked()) return a.tape();
  if (b.tracked()) return b.tape();
  return nullptr;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
  for (const T v : t.vals()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw Error(ErrorCode::Diverged, std::string("non-finite value produced by ") + op);
  }
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  if (Tape<T>* tp = detail::merge_tapes(a, b)) {
    const int an = a.node(), bn = b.node();
    out.attach(tp, tp->record(out.numel(), [an, bn](Tape<T>& t, const std::vector<T>& g) {
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    }));
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  if (Tape<T>* tp = detail::merge_tapes(a, b)) {
    const int an = a.node(), bn = b.node();
    out.attach(tp, tp->record(out.numel(), [an, bn](Tape<T>& t, const std::vector<T>& g) {
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    }));
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  if (Tape<T>* tp = detail::merge_tapes(a, b)) {
    const int an = a.node(), bn = b.node();
    Tensor<T> sa = a.detached(), sb = b.detached();
    out.attach(tp, tp->record(out.numel(), [an, bn, sa, sb](Tape<T>& t, const std::vector<T>& g) {
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        const T* pb2 = sb.ptr();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        const T* pa2 = sa.ptr();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    }));
  }
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
  if (a.tracked()) {
    Tape<T>* tp = a.tape();
    const int an = a.node();
    out.attach(tp, tp->record(out.numel(), [an, s](Tape<T>& t, const std::vector<T>& g) {
      auto& ga = t.grad_buf(an);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    }));
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + s;
  if (a.tracked()) {
    Tape<T>* tp = a.tape();
    const int an = a.node();
    out.attach(tp, tp->record(out.numel(), [an](Tape<T>& t, const std::vector<T>& g) {
      auto& ga = t.grad_buf(an);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Unary elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

// chunk size for parallelizing elementwise transcendentals
constexpr int64_t kElemwiseChunk = 8192;

/// out[i] = f(a[i]); pullback uses df(x, y) where y = f(x). Work is chunked
/// across threads; every element is computed exactly once, so the result is
/// thread-count independent.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, F f, DF df) {
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  T* po = out.ptr();
  const int64_t n = out.numel();
  const int64_t chunks = (n + kElemwiseChunk - 1) / kElemwiseChunk;
  parallel_for(chunks, [&](int64_t c) {
    const int64_t lo = c * kElemwiseChunk, hi = std::min(n, lo + kElemwiseChunk);
    for (int64_t i = lo; i < hi; ++i) po[i] = f(pa[i]);
  });
  check_finite(out, name);
  if (a.tracked()) {
    Tape<T>* tp = a.tape();
    const int an = a.node();
    Tensor<T> sa = a.detached(), so = out.detached();
    out.attach(tp, tp->record(n, [an, sa, so, df, n](Tape<T>& t, const std::vector<T>& g) {
      auto& ga = t.grad_buf(an);
      T* pga = ga.data();
      const T* pg = g.data();
      const T* px = sa.ptr();
      const T* py = so.ptr();
      const int64_t chunks2 = (n + kElemwiseChunk - 1) / kElemwiseChunk;
      parallel_for(chunks2, [&](int64_t c) {
        const int64_t lo = c * kElemwiseChunk, hi = std::min(n, lo + kElemwiseChunk);
        for (int64_t i = lo; i < hi; ++i) pga[i] += pg[i] * df(px[i], py[i]);
      });
    }));
  }
  return out;
}

}  // namespace detail

/// Exact GELU, x * Phi(x) with the normal CDF via erf (not the tanh form).
/// Math runs in the tensor's own precision.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
  const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
  const T half = static_cast<T>(0.5);
  return detail::unary_op(
      a, "gelu",
      [=](T x) { return x * half * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) {
        const T phi = half * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(-half * x * x);
        return phi + x * pdf;
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      a, "sigmoid",
      [](T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// softplus with the overflow-safe branch for large x.
template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary_op(
      a, "softplus",
      [](T x) { return x > T(20) ? x : std::log1p(std::exp(x)); },
      [](T x, T) { return x > T(20) ? T(1) : T(1) / (T(1) + std::exp(-x)); });
}

template <typename T>
Tensor<T> sin_op(const Tensor<T>& a) {
  return detail::unary_op(
      a, "sin", [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
Tensor<T> cos_op(const Tensor<T>& a) {
  return detail::unary_op(
      a, "cos", [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  return detail::unary_op(
      a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// Dispatch matching the activation-kind contract.
enum class Activation { Gelu, Sigmoid, Softplus };

template <typename T>
Tensor<T> activation(const Tensor<T>& a, Activation kind) {
  switch (kind) {
    case Activation::Gelu: return gelu(a);
    case Activation::Sigmoid: return sigmoid(a);
    case Activation::Softplus: return softplus(a);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown activation kind");
}

// ---------------------------------------------------------------------------
// Reductions and slicing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  const T* pa = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  Tensor<T> out = Tensor<T>::full({1}, acc);
  if (a.tracked()) {
    Tape<T>* tp = a.tape();
    const int an = a.node();
    const int64_t n = a.numel();
    out.attach(tp, tp->record(1, [an, n](Tape<T>& t, const std::vector<T>& g) {
      auto& ga = t.grad_buf(an);
      for (int64_t i = 0; i < n; ++i) ga[i] += g[0];
    }));
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Mean squared error between same-shape tensors.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> d = sub(a, b);
  return mean(mul(d, d));
}

/// View of rows [start, start+count) along axis 0, as a copy.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int64_t start, int64_t count) {
  require(!a.shape().empty(), ErrorCode::ShapeMismatch, "slice_rows: rank-0 tensor");
  require(start >= 0 && count >= 1 && start + count <= a.dim(0), ErrorCode::InvalidArgument,
          "slice_rows: range out of bounds");
  const int64_t row = a.numel() / a.dim(0);
  Shape os = a.shape();
  os[0] = count;
  Tensor<T> out(os);
  std::memcpy(out.ptr(), a.ptr() + start * row, sizeof(T) * count * row);
  if (a.tracked()) {
    Tape<T>* tp = a.tape();
    const int an = a.node();
    out.attach(tp, tp->record(out.numel(), [an, start, row](Tape<T>& t, const std::vector<T>& g) {
      auto& ga = t.grad_buf(an);
      for (size_t i = 0; i < g.size(); ++i) ga[start * row + i] += g[i];
    }));
  }
  return out;
}

}  // namespace fbdiff
