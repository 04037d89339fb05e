#pragma once

// Dense row-major array engine with reverse-mode automatic differentiation.
//
// TensorT<T> is a value type with shared immutable storage; ops return fresh
// tensors and never mutate inputs. TapeT<T> records one node per produced
// value in creation order, which is a topological order by construction, so
// backward() is a single reverse sweep over the node list. Gradients live in
// per-node accumulators owned by the tape; leaves are registered through
// watch() and deduplicated by storage identity.
//
// Every op validates shapes and rejects non-finite outputs. Reductions run
// in a fixed sequential order so results are reproducible bit for bit.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gafield/rng.hpp"

namespace gafield {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
class TapeT;

template <class T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(shape_numel(t.shape_), T(0));
    return t;
  }

  static TensorT full(Shape shape, T value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static TensorT from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("Tensor::from: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static TensorT scalar(T v) { return from({}, {v}); }

  static TensorT row(std::vector<T> values) {
    const std::size_t n = values.size();
    return from({n}, std::move(values));
  }

  static TensorT uniform(Shape shape, Rng& rng, T lo, T hi) {
    TensorT t = zeros(std::move(shape));
    for (T& v : *t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static TensorT normal(Shape shape, Rng& rng, T mean = T(0), T stddev = T(1)) {
    TensorT t = zeros(std::move(shape));
    for (T& v : *t.data_) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("rows(): tensor is not 2-D: " + shape_str(shape_));
    return shape_[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("cols(): tensor is not 2-D: " + shape_str(shape_));
    return shape_[1];
  }

  const std::vector<T>& vec() const { return *data_; }
  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  std::shared_ptr<const std::vector<T>> handle() const { return data_; }

  // Mutable storage access for initialization and optimizer updates. Never
  // call while a tape recorded against this storage is still live.
  std::vector<T>& storage() { return *data_; }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  bool tracked() const { return tape_ != nullptr && node_ >= 0; }
  TapeT<T>* tape() const { return tape_; }
  int node() const { return node_; }

  TensorT detached() const {
    TensorT t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  void bind(TapeT<T>* tape, int node) {
    tape_ = tape;
    node_ = node;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  TapeT<T>* tape_ = nullptr;
  int node_ = -1;
};

template <class T>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Register a leaf (typically a parameter). Repeated watches of the same
  // storage return the same node so gradients accumulate across uses.
  TensorT<T> watch(const TensorT<T>& t) {
    if (t.tracked() && t.tape() == this) return t;
    const void* key = t.handle().get();
    auto it = leaf_by_storage_.find(key);
    TensorT<T> alias = t.detached();
    if (it != leaf_by_storage_.end()) {
      alias.bind(this, it->second);
      return alias;
    }
    const int id = push(t.numel(), {});
    leaf_by_storage_.emplace(key, id);
    alias.bind(this, id);
    return alias;
  }

  // Appends a node and returns its id. Call sites capture the id inside the
  // pull lambda as `on = node_count()`, which is evaluated before push runs
  // and therefore equals the returned id.
  int push(std::size_t size, std::function<void(TapeT&)> pull) {
    nodes_.push_back(Node{size, std::move(pull)});
    grads_.emplace_back(size, T(0));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<T>& grad_buf(int node) { return grads_.at(static_cast<std::size_t>(node)); }

  void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.tracked() || loss.tape() != this)
      throw std::invalid_argument("backward: loss is not recorded on this tape");
    grads_[static_cast<std::size_t>(loss.node())][0] = T(1);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      if (node.pull) node.pull(*this);
    }
  }

  // Gradient of a value produced on or watched by this tape. Untouched
  // leaves report exact zeros.
  std::span<const T> grad(const TensorT<T>& t) const {
    int id = -1;
    if (t.tracked() && t.tape() == this) {
      id = t.node();
    } else {
      auto it = leaf_by_storage_.find(t.handle().get());
      if (it == leaf_by_storage_.end())
        throw std::invalid_argument("Tape::grad: value was never watched or produced here");
      id = it->second;
    }
    const auto& g = grads_.at(static_cast<std::size_t>(id));
    return {g.data(), g.size()};
  }

  bool watched(const TensorT<T>& t) const {
    return (t.tracked() && t.tape() == this) || leaf_by_storage_.count(t.handle().get()) > 0;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t size;
    std::function<void(TapeT&)> pull;  // null for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::unordered_map<const void*, int> leaf_by_storage_;
};

using Tensor = TensorT<double>;
using Tape = TapeT<double>;

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

template <class T>
void ensure_finite(const char* op, const TensorT<T>& t) {
  for (T v : t.vec()) {
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

template <class T>
TapeT<T>* result_tape(std::initializer_list<const TensorT<T>*> inputs) {
  TapeT<T>* tape = nullptr;
  for (const TensorT<T>* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape())
      throw std::invalid_argument("op combines tensors recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <class T>
int node_on(const TensorT<T>& t, TapeT<T>* tape) {
  return (t.tracked() && t.tape() == tape) ? t.node() : -1;
}

template <class T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T>
using EigenMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("add", a, b);
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::ensure_finite("add", out);
  if (auto* tp = detail::result_tape<T>({&a, &b})) {
    const int an = detail::node_on(a, tp), bn = detail::node_on(b, tp);
    const int on = tp->push(out.numel(), [an, bn, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("sub", a, b);
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  detail::ensure_finite("sub", out);
  if (auto* tp = detail::result_tape<T>({&a, &b})) {
    const int an = detail::node_on(a, tp), bn = detail::node_on(b, tp);
    const int on = tp->push(out.numel(), [an, bn, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("mul", a, b);
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::ensure_finite("mul", out);
  if (auto* tp = detail::result_tape<T>({&a, &b})) {
    const int an = detail::node_on(a, tp), bn = detail::node_on(b, tp);
    auto ah = a.handle();
    auto bh = b.handle();
    const int on = tp->push(out.numel(), [an, bn, ah, bh, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bh)[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ah)[i];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("div", a, b);
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  detail::ensure_finite("div", out);
  if (auto* tp = detail::result_tape<T>({&a, &b})) {
    const int an = detail::node_on(a, tp), bn = detail::node_on(b, tp);
    auto ah = a.handle();
    auto bh = b.handle();
    const int on = tp->push(out.numel(), [an, bn, ah, bh, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*bh)[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < g.size(); ++i)
          gb[i] -= g[i] * (*ah)[i] / ((*bh)[i] * (*bh)[i]);
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// scalar and unary ops

namespace detail {

// Shared skeleton for elementwise unary ops: fwd maps x->y, dfx gives dy/dx
// from (x, y).
template <class T, class Fwd, class Grad>
TensorT<T> unary_op(const char* name, const TensorT<T>& x, Fwd fwd, Grad dfx) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  detail::ensure_finite(name, out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    auto xh = x.handle();
    auto oh = out.handle();
    const int on = tp->push(out.numel(), [xn, xh, oh, dfx, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfx((*xh)[i], (*oh)[i]);
    });
    out.bind(tp, on);
  }
  return out;
}

}  // namespace detail

template <class T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
  return detail::unary_op<T>("add_scalar", x, [c](T v) { return v + c; },
                             [](T, T) { return T(1); });
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& x, T c) {
  return detail::unary_op<T>("mul_scalar", x, [c](T v) { return v * c; },
                             [c](T, T) { return c; });
}

template <class T>
TensorT<T> neg(const TensorT<T>& x) {
  return mul_scalar(x, T(-1));
}

template <class T>
TensorT<T> exp(const TensorT<T>& x) {
  return detail::unary_op<T>("exp", x, [](T v) { return std::exp(v); },
                             [](T, T y) { return y; });
}

template <class T>
TensorT<T> log(const TensorT<T>& x) {
  return detail::unary_op<T>("log", x, [](T v) { return std::log(v); },
                             [](T v, T) { return T(1) / v; });
}

template <class T>
TensorT<T> sqrt(const TensorT<T>& x) {
  return detail::unary_op<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                             [](T, T y) { return T(1) / (T(2) * y); });
}

// |x| with subgradient 0 at the kink.
template <class T>
TensorT<T> abs(const TensorT<T>& x) {
  return detail::unary_op<T>("abs", x, [](T v) { return std::abs(v); },
                             [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
TensorT<T> tanh(const TensorT<T>& x) {
  return detail::unary_op<T>("tanh", x, [](T v) { return std::tanh(v); },
                             [](T, T y) { return T(1) - y * y; });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  return detail::unary_op<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                             [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op<T>(
      "gelu", x,
      [](T v) {
        return static_cast<T>(T(0.5) * v * (T(1) + std::erf(v * T(kInvSqrt2))));
      },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2)));
        const T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

template <class T>
TensorT<T> silu(const TensorT<T>& x) {
  return detail::unary_op<T>(
      "silu", x,
      [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
TensorT<T> softplus(const TensorT<T>& x) {
  return detail::unary_op<T>(
      "softplus", x,
      [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <class T>
TensorT<T> detach(const TensorT<T>& x) {
  return x.detached();
}

// ---------------------------------------------------------------------------
// matmul

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  TensorT<T> out = TensorT<T>::zeros({m, n});
  {
    detail::ConstEigenMap<T> am(a.vec().data(), static_cast<long>(m), static_cast<long>(k));
    detail::ConstEigenMap<T> bm(b.vec().data(), static_cast<long>(k), static_cast<long>(n));
    detail::EigenMap<T> om(out.storage().data(), static_cast<long>(m), static_cast<long>(n));
    om.noalias() = am * bm;
  }
  detail::ensure_finite("matmul", out);
  if (auto* tp = detail::result_tape<T>({&a, &b})) {
    const int an = detail::node_on(a, tp), bn = detail::node_on(b, tp);
    auto ah = a.handle();
    auto bh = b.handle();
    const int on = tp->push(out.numel(), [an, bn, ah, bh, m, k, n, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      detail::ConstEigenMap<T> gm(g.data(), static_cast<long>(m), static_cast<long>(n));
      if (an >= 0) {
        detail::ConstEigenMap<T> bm(bh->data(), static_cast<long>(k), static_cast<long>(n));
        detail::EigenMap<T> gam(t.grad_buf(an).data(), static_cast<long>(m), static_cast<long>(k));
        gam.noalias() += gm * bm.transpose();
      }
      if (bn >= 0) {
        detail::ConstEigenMap<T> am(ah->data(), static_cast<long>(m), static_cast<long>(k));
        detail::EigenMap<T> gbm(t.grad_buf(bn).data(), static_cast<long>(k), static_cast<long>(n));
        gbm.noalias() += am.transpose() * gm;
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcast ops (leading-axis and scalar only)

// X[N x C] + v[C], one copy of v added per row.
template <class T>
TensorT<T> add_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.numel() != x.cols())
    throw ShapeError("add_rowvec: need [NxC] and [C], got " + shape_str(x.shape()) + " and " +
                     shape_str(v.shape()));
  const std::size_t n = x.rows(), c = x.cols();
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const auto& xv = x.vec();
  const auto& vv = v.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + vv[j];
  detail::ensure_finite("add_rowvec", out);
  if (auto* tp = detail::result_tape<T>({&x, &v})) {
    const int xn = detail::node_on(x, tp), vn = detail::node_on(v, tp);
    const int on = tp->push(out.numel(), [xn, vn, n, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (xn >= 0) {
        auto& gx = t.grad_buf(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (vn >= 0) {
        auto& gv = t.grad_buf(vn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// X[N x C] * v[C] columnwise.
template <class T>
TensorT<T> mul_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.numel() != x.cols())
    throw ShapeError("mul_rowvec: need [NxC] and [C], got " + shape_str(x.shape()) + " and " +
                     shape_str(v.shape()));
  const std::size_t n = x.rows(), c = x.cols();
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const auto& xv = x.vec();
  const auto& vv = v.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] * vv[j];
  detail::ensure_finite("mul_rowvec", out);
  if (auto* tp = detail::result_tape<T>({&x, &v})) {
    const int xn = detail::node_on(x, tp), vn = detail::node_on(v, tp);
    auto xh = x.handle();
    auto vh = v.handle();
    const int on = tp->push(out.numel(), [xn, vn, xh, vh, n, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (xn >= 0) {
        auto& gx = t.grad_buf(xn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * (*vh)[j];
      }
      if (vn >= 0) {
        auto& gv = t.grad_buf(vn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j] * (*xh)[i * c + j];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// X[N x C] scaled per row by v[N].
template <class T>
TensorT<T> mul_colvec(const TensorT<T>& x, const TensorT<T>& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.numel() != x.rows())
    throw ShapeError("mul_colvec: need [NxC] and [N], got " + shape_str(x.shape()) + " and " +
                     shape_str(v.shape()));
  const std::size_t n = x.rows(), c = x.cols();
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const auto& xv = x.vec();
  const auto& vv = v.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] * vv[i];
  detail::ensure_finite("mul_colvec", out);
  if (auto* tp = detail::result_tape<T>({&x, &v})) {
    const int xn = detail::node_on(x, tp), vn = detail::node_on(v, tp);
    auto xh = x.handle();
    auto vh = v.handle();
    const int on = tp->push(out.numel(), [xn, vn, xh, vh, n, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (xn >= 0) {
        auto& gx = t.grad_buf(xn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * (*vh)[i];
      }
      if (vn >= 0) {
        auto& gv = t.grad_buf(vn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[i] += g[i * c + j] * (*xh)[i * c + j];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T acc = T(0);
  for (T v : x.vec()) acc += v;
  TensorT<T> out = TensorT<T>::scalar(acc);
  detail::ensure_finite("sum", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const std::size_t sz = x.numel();
    const int on = tp->push(1, [xn, sz, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const T g = t.grad_buf(on)[0];
      auto& gx = t.grad_buf(xn);
      for (std::size_t i = 0; i < sz; ++i) gx[i] += g;
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Axis reductions on 2-D tensors. axis 0 collapses rows -> [C], axis 1
// collapses columns -> [N].
template <class T>
TensorT<T> sum_axis(const TensorT<T>& x, int axis) {
  if (x.rank() != 2) throw ShapeError("sum_axis: expects 2-D tensor");
  if (axis != 0 && axis != 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  const std::size_t n = x.rows(), c = x.cols();
  if ((axis == 0 ? n : c) == 0) throw ShapeError("sum_axis: reduction over empty axis");
  TensorT<T> out = TensorT<T>::zeros({axis == 0 ? c : n});
  const auto& xv = x.vec();
  auto& ov = out.storage();
  if (axis == 0) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) ov[j] += xv[i * c + j];
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      T acc = T(0);
      for (std::size_t j = 0; j < c; ++j) acc += xv[i * c + j];
      ov[i] = acc;
    }
  }
  detail::ensure_finite("sum_axis", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const int on = tp->push(out.numel(), [xn, n, c, axis, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[axis == 0 ? j : i];
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> mean_axis(const TensorT<T>& x, int axis) {
  const std::size_t extent = axis == 0 ? x.rows() : x.cols();
  return mul_scalar(sum_axis(x, axis), T(1) / static_cast<T>(extent));
}

// Max along an axis; gradient routes to the first maximal element.
template <class T>
TensorT<T> max_axis(const TensorT<T>& x, int axis) {
  if (x.rank() != 2) throw ShapeError("max_axis: expects 2-D tensor");
  if (axis != 0 && axis != 1) throw ShapeError("max_axis: axis must be 0 or 1");
  const std::size_t n = x.rows(), c = x.cols();
  if ((axis == 0 ? n : c) == 0) throw ShapeError("max_axis: reduction over empty axis");
  const std::size_t out_n = axis == 0 ? c : n;
  TensorT<T> out = TensorT<T>::zeros({out_n});
  auto arg = std::make_shared<std::vector<std::size_t>>(out_n, 0);
  const auto& xv = x.vec();
  auto& ov = out.storage();
  if (axis == 0) {
    for (std::size_t j = 0; j < c; ++j) {
      T best = xv[j];
      std::size_t bi = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (xv[i * c + j] > best) { best = xv[i * c + j]; bi = i; }
      ov[j] = best;
      (*arg)[j] = bi;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      T best = xv[i * c];
      std::size_t bj = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (xv[i * c + j] > best) { best = xv[i * c + j]; bj = j; }
      ov[i] = best;
      (*arg)[i] = bj;
    }
  }
  detail::ensure_finite("max_axis", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const int on = tp->push(out.numel(), [xn, arg, c, axis, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t r = 0; r < g.size(); ++r) {
        const std::size_t i = axis == 0 ? (*arg)[r] : r;
        const std::size_t j = axis == 0 ? r : (*arg)[r];
        gx[i * c + j] += g[r];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax

// Numerically stabilized dense softmax along axis of a 2-D tensor (or over a
// 1-D tensor with axis 0).
template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  if (x.rank() == 1) {
    if (axis != 0) throw ShapeError("softmax: 1-D tensor only has axis 0");
    if (x.numel() == 0) throw ShapeError("softmax: empty axis");
  } else if (x.rank() == 2) {
    if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
    if ((axis == 0 ? x.rows() : x.cols()) == 0) throw ShapeError("softmax: empty axis");
  } else {
    throw ShapeError("softmax: expects 1-D or 2-D tensor");
  }
  const std::size_t n = x.rank() == 1 ? 1 : (axis == 1 ? x.rows() : x.cols());
  const std::size_t m = x.rank() == 1 ? x.numel() : (axis == 1 ? x.cols() : x.rows());
  // Strides: lane l of slice s sits at s*ss + l*ls.
  const std::size_t ss = x.rank() == 1 ? 0 : (axis == 1 ? x.cols() : 1);
  const std::size_t ls = (x.rank() == 1 || axis == 1) ? 1 : x.cols();

  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t s = 0; s < n; ++s) {
    T mx = xv[s * ss];
    for (std::size_t l = 1; l < m; ++l) mx = std::max(mx, xv[s * ss + l * ls]);
    T z = T(0);
    for (std::size_t l = 0; l < m; ++l) {
      const T e = std::exp(xv[s * ss + l * ls] - mx);
      ov[s * ss + l * ls] = e;
      z += e;
    }
    for (std::size_t l = 0; l < m; ++l) ov[s * ss + l * ls] /= z;
  }
  detail::ensure_finite("softmax", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    auto oh = out.handle();
    const int on = tp->push(out.numel(), [xn, oh, n, m, ss, ls, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t s = 0; s < n; ++s) {
        T dot = T(0);
        for (std::size_t l = 0; l < m; ++l) {
          const std::size_t k = s * ss + l * ls;
          dot += g[k] * (*oh)[k];
        }
        for (std::size_t l = 0; l < m; ++l) {
          const std::size_t k = s * ss + l * ls;
          gx[k] += (*oh)[k] * (g[k] - dot);
        }
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  TensorT<T> out = TensorT<T>::from(std::move(shape), std::vector<T>(x.vec()));
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const int on = tp->push(out.numel(), [xn, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw ShapeError("concat_cols: need matching row counts, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
  TensorT<T> out = TensorT<T>::zeros({n, ca + cb});
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ca; ++j) ov[i * (ca + cb) + j] = av[i * ca + j];
    for (std::size_t j = 0; j < cb; ++j) ov[i * (ca + cb) + ca + j] = bv[i * cb + j];
  }
  if (auto* tp = detail::result_tape<T>({&a, &b})) {
    const int an = detail::node_on(a, tp), bn = detail::node_on(b, tp);
    const int on = tp->push(out.numel(), [an, bn, n, ca, cb, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> concat_vec(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 1 || b.rank() != 1)
    throw ShapeError("concat_vec: expects 1-D tensors");
  const std::size_t na = a.numel(), nb = b.numel();
  TensorT<T> out = TensorT<T>::zeros({na + nb});
  auto& ov = out.storage();
  for (std::size_t i = 0; i < na; ++i) ov[i] = a.vec()[i];
  for (std::size_t i = 0; i < nb; ++i) ov[na + i] = b.vec()[i];
  if (auto* tp = detail::result_tape<T>({&a, &b})) {
    const int an = detail::node_on(a, tp), bn = detail::node_on(b, tp);
    const int on = tp->push(out.numel(), [an, bn, na, nb, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      const auto& g = t.grad_buf(on);
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> slice_cols(const TensorT<T>& x, std::size_t start, std::size_t len) {
  if (x.rank() != 2) throw ShapeError("slice_cols: expects 2-D tensor");
  if (start + len > x.cols()) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t n = x.rows(), c = x.cols();
  TensorT<T> out = TensorT<T>::zeros({n, len});
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < len; ++j) ov[i * len + j] = xv[i * c + start + j];
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const int on = tp->push(out.numel(), [xn, n, c, start, len, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < len; ++j) gx[i * c + start + j] += g[i * len + j];
    });
    out.bind(tp, on);
  }
  return out;
}

template <class T>
TensorT<T> subvector(const TensorT<T>& x, std::size_t start, std::size_t len) {
  if (x.rank() != 1) throw ShapeError("subvector: expects 1-D tensor");
  if (start + len > x.numel()) throw ShapeError("subvector: range out of bounds");
  TensorT<T> out = TensorT<T>::zeros({len});
  for (std::size_t i = 0; i < len; ++i) out.storage()[i] = x.vec()[start + i];
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const int on = tp->push(len, [xn, start, len, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t i = 0; i < len; ++i) gx[start + i] += g[i];
    });
    out.bind(tp, on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// gather / scatter / segment ops

// out[r] = x[idx[r]] rowwise. Adjoint is scatter-add over the same index map.
template <class T>
TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expects 2-D tensor");
  const std::size_t n = x.rows(), c = x.cols();
  for (int i : idx)
    if (i < 0 || static_cast<std::size_t>(i) >= n)
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(n) + ")");
  TensorT<T> out = TensorT<T>::zeros({idx.size(), c});
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(xv.begin() + static_cast<long>(idx[r] * c), c, ov.begin() + static_cast<long>(r * c));
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    auto ih = std::make_shared<std::vector<int>>(idx);
    const int on = tp->push(out.numel(), [xn, ih, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t r = 0; r < ih->size(); ++r) {
        const std::size_t src = r * c, dst = static_cast<std::size_t>((*ih)[r]) * c;
        for (std::size_t j = 0; j < c; ++j) gx[dst + j] += g[src + j];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// out[idx[r]] += x[r] rowwise, accumulated in row order r = 0..E-1.
// Adjoint is gather over the same index map.
template <class T>
TensorT<T> scatter_add_rows(const TensorT<T>& x, const std::vector<int>& idx, std::size_t n_rows) {
  if (x.rank() != 2) throw ShapeError("scatter_add_rows: expects 2-D tensor");
  if (idx.size() != x.rows())
    throw ShapeError("scatter_add_rows: index count does not match row count");
  for (int i : idx)
    if (i < 0 || static_cast<std::size_t>(i) >= n_rows)
      throw ShapeError("scatter_add_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(n_rows) + ")");
  const std::size_t c = x.cols();
  TensorT<T> out = TensorT<T>::zeros({n_rows, c});
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::size_t dst = static_cast<std::size_t>(idx[r]) * c;
    for (std::size_t j = 0; j < c; ++j) ov[dst + j] += xv[r * c + j];
  }
  detail::ensure_finite("scatter_add_rows", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    auto ih = std::make_shared<std::vector<int>>(idx);
    const int on = tp->push(out.numel(), [xn, ih, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t r = 0; r < ih->size(); ++r) {
        const std::size_t src = static_cast<std::size_t>((*ih)[r]) * c;
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[src + j];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

namespace detail {

inline void check_runs(const char* op, const std::vector<int>& offsets, std::size_t n_values) {
  if (offsets.empty() || offsets.front() != 0 ||
      static_cast<std::size_t>(offsets.back()) != n_values)
    throw ShapeError(std::string(op) + ": malformed run offsets");
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r)
    if (offsets[r] > offsets[r + 1]) throw ShapeError(std::string(op) + ": run offsets not sorted");
}

}  // namespace detail

// Sum of each contiguous run of rows, written to targets[r]. Rows not named
// by any run stay zero.
template <class T>
TensorT<T> segment_sum_runs(const TensorT<T>& x, const std::vector<int>& offsets,
                            const std::vector<int>& targets, std::size_t n_rows) {
  if (x.rank() != 2) throw ShapeError("segment_sum_runs: expects 2-D tensor");
  detail::check_runs("segment_sum_runs", offsets, x.rows());
  if (targets.size() + 1 != offsets.size())
    throw ShapeError("segment_sum_runs: one target per run required");
  const std::size_t c = x.cols();
  TensorT<T> out = TensorT<T>::zeros({n_rows, c});
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    const std::size_t dst = static_cast<std::size_t>(targets[r]) * c;
    for (int e = offsets[r]; e < offsets[r + 1]; ++e)
      for (std::size_t j = 0; j < c; ++j) ov[dst + j] += xv[static_cast<std::size_t>(e) * c + j];
  }
  detail::ensure_finite("segment_sum_runs", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    auto offs = std::make_shared<std::vector<int>>(offsets);
    auto tgts = std::make_shared<std::vector<int>>(targets);
    const int on = tp->push(out.numel(), [xn, offs, tgts, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t r = 0; r + 1 < offs->size(); ++r) {
        const std::size_t src = static_cast<std::size_t>((*tgts)[r]) * c;
        for (int e = (*offs)[r]; e < (*offs)[r + 1]; ++e)
          for (std::size_t j = 0; j < c; ++j) gx[static_cast<std::size_t>(e) * c + j] += g[src + j];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// Running mean of each contiguous run of rows, written to targets[r].
// The incremental form m += (x - m)/k reproduces constant inputs exactly,
// which makes mean pooling idempotent on already-pooled fields.
template <class T>
TensorT<T> segment_mean_runs(const TensorT<T>& x, const std::vector<int>& offsets,
                             const std::vector<int>& targets, std::size_t n_rows) {
  if (x.rank() != 2) throw ShapeError("segment_mean_runs: expects 2-D tensor");
  detail::check_runs("segment_mean_runs", offsets, x.rows());
  if (targets.size() + 1 != offsets.size())
    throw ShapeError("segment_mean_runs: one target per run required");
  const std::size_t c = x.cols();
  TensorT<T> out = TensorT<T>::zeros({n_rows, c});
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    if (offsets[r] == offsets[r + 1])
      throw ShapeError("segment_mean_runs: empty run has no mean");
    const std::size_t dst = static_cast<std::size_t>(targets[r]) * c;
    T k = T(0);
    for (int e = offsets[r]; e < offsets[r + 1]; ++e) {
      k += T(1);
      for (std::size_t j = 0; j < c; ++j)
        ov[dst + j] += (xv[static_cast<std::size_t>(e) * c + j] - ov[dst + j]) / k;
    }
  }
  detail::ensure_finite("segment_mean_runs", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    auto offs = std::make_shared<std::vector<int>>(offsets);
    auto tgts = std::make_shared<std::vector<int>>(targets);
    const int on = tp->push(out.numel(), [xn, offs, tgts, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t r = 0; r + 1 < offs->size(); ++r) {
        const std::size_t src = static_cast<std::size_t>((*tgts)[r]) * c;
        const T inv = T(1) / static_cast<T>((*offs)[r + 1] - (*offs)[r]);
        for (int e = (*offs)[r]; e < (*offs)[r + 1]; ++e)
          for (std::size_t j = 0; j < c; ++j)
            gx[static_cast<std::size_t>(e) * c + j] += g[src + j] * inv;
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// Columnwise max of each contiguous run; gradient routes to the first
// maximal row within the run.
template <class T>
TensorT<T> segment_max_runs(const TensorT<T>& x, const std::vector<int>& offsets,
                            const std::vector<int>& targets, std::size_t n_rows) {
  if (x.rank() != 2) throw ShapeError("segment_max_runs: expects 2-D tensor");
  detail::check_runs("segment_max_runs", offsets, x.rows());
  if (targets.size() + 1 != offsets.size())
    throw ShapeError("segment_max_runs: one target per run required");
  const std::size_t c = x.cols();
  TensorT<T> out = TensorT<T>::zeros({n_rows, c});
  auto arg = std::make_shared<std::vector<int>>(n_rows * c, -1);
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    if (offsets[r] == offsets[r + 1])
      throw ShapeError("segment_max_runs: empty run has no maximum");
    const std::size_t dst = static_cast<std::size_t>(targets[r]) * c;
    for (std::size_t j = 0; j < c; ++j) {
      T best = xv[static_cast<std::size_t>(offsets[r]) * c + j];
      int bi = offsets[r];
      for (int e = offsets[r] + 1; e < offsets[r + 1]; ++e) {
        const T v = xv[static_cast<std::size_t>(e) * c + j];
        if (v > best) { best = v; bi = e; }
      }
      ov[dst + j] = best;
      (*arg)[dst + j] = bi;
    }
  }
  detail::ensure_finite("segment_max_runs", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const int on = tp->push(out.numel(), [xn, arg, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const int e = (*arg)[k];
        if (e >= 0) gx[static_cast<std::size_t>(e) * c + k % c] += g[k];
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// Columnwise stabilized softmax within each contiguous run of rows.
template <class T>
TensorT<T> segment_softmax_runs(const TensorT<T>& x, const std::vector<int>& offsets) {
  if (x.rank() != 2) throw ShapeError("segment_softmax_runs: expects 2-D tensor");
  detail::check_runs("segment_softmax_runs", offsets, x.rows());
  const std::size_t c = x.cols();
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    if (offsets[r] == offsets[r + 1])
      throw ShapeError("segment_softmax_runs: empty run");
    for (std::size_t j = 0; j < c; ++j) {
      T mx = xv[static_cast<std::size_t>(offsets[r]) * c + j];
      for (int e = offsets[r] + 1; e < offsets[r + 1]; ++e)
        mx = std::max(mx, xv[static_cast<std::size_t>(e) * c + j]);
      T z = T(0);
      for (int e = offsets[r]; e < offsets[r + 1]; ++e) {
        const T v = std::exp(xv[static_cast<std::size_t>(e) * c + j] - mx);
        ov[static_cast<std::size_t>(e) * c + j] = v;
        z += v;
      }
      for (int e = offsets[r]; e < offsets[r + 1]; ++e)
        ov[static_cast<std::size_t>(e) * c + j] /= z;
    }
  }
  detail::ensure_finite("segment_softmax_runs", out);
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    auto offs = std::make_shared<std::vector<int>>(offsets);
    auto oh = out.handle();
    const int on = tp->push(out.numel(), [xn, offs, oh, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t r = 0; r + 1 < offs->size(); ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          T dot = T(0);
          for (int e = (*offs)[r]; e < (*offs)[r + 1]; ++e) {
            const std::size_t k = static_cast<std::size_t>(e) * c + j;
            dot += g[k] * (*oh)[k];
          }
          for (int e = (*offs)[r]; e < (*offs)[r + 1]; ++e) {
            const std::size_t k = static_cast<std::size_t>(e) * c + j;
            gx[k] += (*oh)[k] * (g[k] - dot);
          }
        }
      }
    });
    out.bind(tp, on);
  }
  return out;
}

// Expand [N x g] to [N x g*r] by repeating each column r times contiguously,
// so column g*r..(g+1)*r-1 all read group column g.
template <class T>
TensorT<T> repeat_cols(const TensorT<T>& x, std::size_t r) {
  if (x.rank() != 2) throw ShapeError("repeat_cols: expects 2-D tensor");
  if (r == 0) throw ShapeError("repeat_cols: repeat factor must be positive");
  const std::size_t n = x.rows(), g = x.cols(), c = g * r;
  TensorT<T> out = TensorT<T>::zeros({n, c});
  const auto& xv = x.vec();
  auto& ov = out.storage();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < g; ++l)
      for (std::size_t m = 0; m < r; ++m) ov[i * c + l * r + m] = xv[i * g + l];
  if (auto* tp = detail::result_tape<T>({&x})) {
    const int xn = detail::node_on(x, tp);
    const int on = tp->push(out.numel(), [xn, n, g, r, c, on = static_cast<int>(tp->node_count())](TapeT<T>& t) {
      if (xn < 0) return;
      const auto& g_out = t.grad_buf(on);
      auto& gx = t.grad_buf(xn);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < g; ++l)
          for (std::size_t m = 0; m < r; ++m) gx[i * g + l] += g_out[i * c + l * r + m];
    });
    out.bind(tp, on);
  }
  return out;
}

// ---------------------------------------------------------------------------
// norms (composed from primitives, so they differentiate for free)

template <class T>
TensorT<T> l1_norm(const TensorT<T>& x) {
  return sum_all(abs(x));
}

template <class T>
TensorT<T> l2_norm(const TensorT<T>& x) {
  return sqrt(sum_all(mul(x, x)));
}

// ---------------------------------------------------------------------------
// non-AD helpers

template <class T>
bool allclose(const TensorT<T>& a, const TensorT<T>& b, T atol, T rtol = T(0)) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T d = std::abs(a.vec()[i] - b.vec()[i]);
    if (d > atol + rtol * std::max(std::abs(a.vec()[i]), std::abs(b.vec()[i]))) return false;
  }
  return true;
}

template <class T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape("max_abs_diff", a, b);
  T m = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.vec()[i] - b.vec()[i]));
  return m;
}

}  // namespace gafield
