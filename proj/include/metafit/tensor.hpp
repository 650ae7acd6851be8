#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metafit/errors.hpp"

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// Every Tensor wraps a shared graph node holding its value. Primitives
// evaluate eagerly; when recording is enabled and any input requires a
// gradient, the result node keeps its parents and a backward closure.
// Backward closures are themselves written in terms of primitives, so
// running backward() with create_graph=true yields gradients that are
// again differentiable (gradients of gradients). The convolutional
// primitives (conv2d, maxpool2d, batchnorm2d) compute their backward
// passes with raw loops and return constant tensors: first-order only.

namespace metafit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_recording = true;
// Testing hook: when set to an op name, that op's backward outputs are
// scaled by 1.01 so gradient checks can prove they catch a wrong
// backward. Never set outside negative-control tests.
inline thread_local const char* corrupt_backward_op = nullptr;
}

// Disables graph recording for the current thread while alive.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  // Maps the upstream gradient to one gradient per parent (undefined
  // Tensor for parents that take no gradient).
  std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor: element count " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T v) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  const std::vector<T>& data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }

  T item() const {
    if (size() != 1) throw UsageError("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  // A constant copy outside any graph.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  // A fresh leaf with the same value that accepts gradients.
  Tensor leaf() const { return Tensor(node_->shape, node_->value, true); }

  bool all_finite() const {
    for (T v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> inputs,
                  std::function<std::vector<Tensor<T>>(const Tensor<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool track = false;
  if (grad_recording)
    for (const auto& in : inputs)
      if (in.requires_grad()) track = true;
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
    if (corrupt_backward_op && std::string_view(corrupt_backward_op) == op) {
      n->backward = [inner = std::move(backward)](const Tensor<T>& u) {
        auto gs = inner(u);
        for (auto& g : gs)
          if (g.defined()) g = mul(g, Tensor<T>::scalar(T(1.01)));
        return gs;
      };
    } else {
      n->backward = std::move(backward);
    }
  }
  return Tensor<T>(n);
}

// Elementwise binary ops allow equal shapes or a scalar on either side.
enum class BinKind { same, left_scalar, right_scalar };

template <typename T>
BinKind bin_kind(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return BinKind::same;
  if (a.size() == 1) return BinKind::left_scalar;
  if (b.size() == 1) return BinKind::right_scalar;
  throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

template <typename T, typename F>
std::vector<T> bin_eval(BinKind k, const Tensor<T>& a, const Tensor<T>& b, F f) {
  const auto& av = a.data();
  const auto& bv = b.data();
  std::size_t n = std::max(av.size(), bv.size());
  std::vector<T> out(n);
  switch (k) {
    case BinKind::same:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
      break;
    case BinKind::left_scalar:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(av[0], bv[i]);
      break;
    case BinKind::right_scalar:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[0]);
      break;
  }
  return out;
}

}  // namespace detail

// ---- forward declarations needed by backward closures ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> pow(const Tensor<T>& a, T p);
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> colsum(const Tensor<T>& a);
template <typename T> Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t rows);
template <typename T> Tensor<T> softmax(const Tensor<T>& a);
template <typename T> Tensor<T> sum_last_keep(const Tensor<T>& a);
template <typename T> Tensor<T> expand_last(const Tensor<T>& a, std::size_t n);
template <typename T> Tensor<T> select_col(const Tensor<T>& a, std::size_t col);
template <typename T> Tensor<T> embed_col(const Tensor<T>& v, std::size_t col, std::size_t ncols);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// ---- elementwise arithmetic ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto k = detail::bin_kind("add", a, b);
  auto out = detail::bin_eval(k, a, b, [](T x, T y) { return x + y; });
  Shape shape = (k == detail::BinKind::left_scalar) ? b.shape() : a.shape();
  return detail::make_op<T>("add", std::move(shape), std::move(out), {a, b},
      [k](const Tensor<T>& u) {
        Tensor<T> da = (k == detail::BinKind::left_scalar) ? sum(u) : u;
        Tensor<T> db = (k == detail::BinKind::right_scalar) ? sum(u) : u;
        return std::vector<Tensor<T>>{da, db};
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto k = detail::bin_kind("sub", a, b);
  auto out = detail::bin_eval(k, a, b, [](T x, T y) { return x - y; });
  Shape shape = (k == detail::BinKind::left_scalar) ? b.shape() : a.shape();
  return detail::make_op<T>("sub", std::move(shape), std::move(out), {a, b},
      [k](const Tensor<T>& u) {
        Tensor<T> da = (k == detail::BinKind::left_scalar) ? sum(u) : u;
        Tensor<T> db = (k == detail::BinKind::right_scalar) ? neg(sum(u)) : neg(u);
        return std::vector<Tensor<T>>{da, db};
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto k = detail::bin_kind("mul", a, b);
  auto out = detail::bin_eval(k, a, b, [](T x, T y) { return x * y; });
  Shape shape = (k == detail::BinKind::left_scalar) ? b.shape() : a.shape();
  return detail::make_op<T>("mul", std::move(shape), std::move(out), {a, b},
      [k, a, b](const Tensor<T>& u) {
        Tensor<T> da = mul(u, b);
        if (k == detail::BinKind::left_scalar) da = sum(da);
        Tensor<T> db = mul(u, a);
        if (k == detail::BinKind::right_scalar) db = sum(db);
        return std::vector<Tensor<T>>{da, db};
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto k = detail::bin_kind("div", a, b);
  auto out = detail::bin_eval(k, a, b, [](T x, T y) { return x / y; });
  Shape shape = (k == detail::BinKind::left_scalar) ? b.shape() : a.shape();
  return detail::make_op<T>("div", std::move(shape), std::move(out), {a, b},
      [k, a, b](const Tensor<T>& u) {
        Tensor<T> da = div(u, b);
        if (k == detail::BinKind::left_scalar) da = sum(da);
        Tensor<T> db = neg(div(mul(u, a), mul(b, b)));
        if (k == detail::BinKind::right_scalar) db = sum(db);
        return std::vector<Tensor<T>>{da, db};
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a[i];
  return detail::make_op<T>("neg", a.shape(), std::move(out), {a},
      [](const Tensor<T>& u) { return std::vector<Tensor<T>>{neg(u)}; });
}

// ---- reductions ----

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  return detail::make_op<T>("sum", Shape{}, std::vector<T>{acc}, {a},
      [a](const Tensor<T>& u) {
        return std::vector<Tensor<T>>{mul(Tensor<T>::ones(a.shape()), u)};
      });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw UsageError("mean: empty tensor");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  acc /= static_cast<T>(a.size());
  return detail::make_op<T>("mean", Shape{}, std::vector<T>{acc}, {a},
      [a](const Tensor<T>& u) {
        T inv = T(1) / static_cast<T>(a.size());
        return std::vector<Tensor<T>>{mul(Tensor<T>::full(a.shape(), inv), u)};
      });
}

// ---- elementwise nonlinearities ----

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return detail::make_op<T>("relu", a.shape(), std::move(out), {a},
      [a](const Tensor<T>& u) {
        std::vector<T> m(a.size());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = a[i] > T(0) ? T(1) : T(0);
        return std::vector<Tensor<T>>{mul(u, Tensor<T>(a.shape(), std::move(m)))};
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T x = a[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                       : std::exp(x) / (T(1) + std::exp(x));
  }
  return detail::make_op<T>("sigmoid", a.shape(), std::move(out), {a},
      [a](const Tensor<T>& u) {
        // Recomputed from the input so second derivatives flow.
        Tensor<T> s = sigmoid(a);
        Tensor<T> one = Tensor<T>::scalar(T(1));
        return std::vector<Tensor<T>>{mul(u, mul(s, sub(one, s)))};
      });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a[i] > T(0)))
      throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(a[i])));
    out[i] = std::log(a[i]);
  }
  return detail::make_op<T>("log", a.shape(), std::move(out), {a},
      [a](const Tensor<T>& u) { return std::vector<Tensor<T>>{div(u, a)}; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  return detail::make_op<T>("exp", a.shape(), std::move(out), {a},
      [a](const Tensor<T>& u) { return std::vector<Tensor<T>>{mul(u, exp(a))}; });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& a, T p) {
  bool integral = p == std::floor(p);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!integral && a[i] < T(0))
      throw DomainError("pow: negative base with non-integer exponent");
    if (p < T(0) && a[i] == T(0)) throw DomainError("pow: zero base with negative exponent");
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (p == T(0)) ? T(1) : std::pow(a[i], p);
  return detail::make_op<T>("pow", a.shape(), std::move(out), {a},
      [a, p](const Tensor<T>& u) {
        if (p == T(0))
          return std::vector<Tensor<T>>{Tensor<T>::zeros(a.shape())};
        Tensor<T> d = mul(mul(u, Tensor<T>::scalar(p)), pow(a, p - T(1)));
        return std::vector<Tensor<T>>{d};
      });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > floor ? a[i] : floor;
  return detail::make_op<T>("clamp_min", a.shape(), std::move(out), {a},
      [a, floor](const Tensor<T>& u) {
        // Hard gate: no gradient on the clamped branch.
        std::vector<T> m(a.size());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = a[i] > floor ? T(1) : T(0);
        return std::vector<Tensor<T>>{mul(u, Tensor<T>(a.shape(), std::move(m)))};
      });
}

// ---- linear algebra (2-D) ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      T av = a[i * k + l];
      if (av == T(0)) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[l * n + j];
    }
  return detail::make_op<T>("matmul", Shape{m, n}, std::move(out), {a, b},
      [a, b](const Tensor<T>& u) {
        return std::vector<Tensor<T>>{matmul(u, transpose(b)), matmul(transpose(a), u)};
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: shape " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return detail::make_op<T>("transpose", Shape{n, m}, std::move(out), {a},
      [](const Tensor<T>& u) { return std::vector<Tensor<T>>{transpose(u)}; });
}

// x [m,n] + b [n], row-broadcast.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.shape().size() != 2 || b.shape().size() != 1 || x.shape()[1] != b.shape()[0])
    throw ShapeError("add_bias: shape " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + b[j];
  return detail::make_op<T>("add_bias", x.shape(), std::move(out), {x, b},
      [](const Tensor<T>& u) { return std::vector<Tensor<T>>{u, colsum(u)}; });
}

template <typename T>
Tensor<T> colsum(const Tensor<T>& a) {
  if (a.shape().size() != 2) throw ShapeError("colsum: shape " + shape_str(a.shape()));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
  return detail::make_op<T>("colsum", Shape{n}, std::move(out), {a},
      [m](const Tensor<T>& u) { return std::vector<Tensor<T>>{broadcast_rows(u, m)}; });
}

template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& v, std::size_t rows) {
  if (v.shape().size() != 1) throw ShapeError("broadcast_rows: shape " + shape_str(v.shape()));
  std::size_t n = v.shape()[0];
  std::vector<T> out(rows * n);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v[j];
  return detail::make_op<T>("broadcast_rows", Shape{rows, n}, std::move(out), {v},
      [](const Tensor<T>& u) { return std::vector<Tensor<T>>{colsum(u)}; });
}

// ---- softmax over the last axis ----

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.shape().empty()) throw ShapeError("softmax: scalar input");
  std::size_t n = a.shape().back();
  std::size_t rows = a.size() / n;
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = a[r * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a[r * n + j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(a[r * n + j] - mx);
      z += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  return detail::make_op<T>("softmax", a.shape(), std::move(out), {a},
      [a, n](const Tensor<T>& u) {
        Tensor<T> y = softmax(a);
        Tensor<T> t = mul(u, y);
        Tensor<T> s = expand_last(sum_last_keep(t), n);
        return std::vector<Tensor<T>>{mul(y, sub(u, s))};
      });
}

template <typename T>
Tensor<T> sum_last_keep(const Tensor<T>& a) {
  if (a.shape().empty()) throw ShapeError("sum_last_keep: scalar input");
  std::size_t n = a.shape().back();
  std::size_t rows = a.size() / n;
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += a[r * n + j];
  Shape shape = a.shape();
  shape.back() = 1;
  return detail::make_op<T>("sum_last_keep", std::move(shape), std::move(out), {a},
      [n](const Tensor<T>& u) { return std::vector<Tensor<T>>{expand_last(u, n)}; });
}

template <typename T>
Tensor<T> expand_last(const Tensor<T>& a, std::size_t n) {
  if (a.shape().empty() || a.shape().back() != 1)
    throw ShapeError("expand_last: shape " + shape_str(a.shape()));
  std::size_t rows = a.size();
  std::vector<T> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = a[r];
  Shape shape = a.shape();
  shape.back() = n;
  return detail::make_op<T>("expand_last", std::move(shape), std::move(out), {a},
      [](const Tensor<T>& u) { return std::vector<Tensor<T>>{sum_last_keep(u)}; });
}

// ---- column selection ([m,n] <-> [m]) ----

template <typename T>
Tensor<T> select_col(const Tensor<T>& a, std::size_t col) {
  if (a.shape().size() != 2 || col >= a.shape()[1])
    throw ShapeError("select_col: shape " + shape_str(a.shape()) + " col " + std::to_string(col));
  std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = a[i * n + col];
  return detail::make_op<T>("select_col", Shape{m}, std::move(out), {a},
      [col, n](const Tensor<T>& u) {
        return std::vector<Tensor<T>>{embed_col(u, col, n)};
      });
}

template <typename T>
Tensor<T> embed_col(const Tensor<T>& v, std::size_t col, std::size_t ncols) {
  if (v.shape().size() != 1 || col >= ncols)
    throw ShapeError("embed_col: shape " + shape_str(v.shape()));
  std::size_t m = v.shape()[0];
  std::vector<T> out(m * ncols, T(0));
  for (std::size_t i = 0; i < m; ++i) out[i * ncols + col] = v[i];
  return detail::make_op<T>("embed_col", Shape{m, ncols}, std::move(out), {v},
      [col](const Tensor<T>& u) { return std::vector<Tensor<T>>{select_col(u, col)}; });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  Shape old = a.shape();
  return detail::make_op<T>("reshape", std::move(shape), a.data(), {a},
      [old](const Tensor<T>& u) { return std::vector<Tensor<T>>{reshape(u, old)}; });
}

// ---- spatial primitives (first-order backward, raw loops) ----

inline constexpr double kBatchNormEps = 1e-5;

// x [N,C,H,W], w [F,C,3,3], b [F]; stride 1, zero padding 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.shape().size() != 4 || w.shape().size() != 4 || w.shape()[2] != 3 || w.shape()[3] != 3 ||
      b.shape().size() != 1 || x.shape()[1] != w.shape()[1] || b.shape()[0] != w.shape()[0])
    throw ShapeError("conv2d: shape " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::size_t F = w.shape()[0];
  std::vector<T> out(N * F * H * W, T(0));
  auto xat = [&](std::size_t n, std::size_t c, long i, long j) -> T {
    if (i < 0 || j < 0 || i >= static_cast<long>(H) || j >= static_cast<long>(W)) return T(0);
    return x[((n * C + c) * H + i) * W + j];
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          T acc = b[f];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < 3; ++p)
              for (std::size_t q = 0; q < 3; ++q)
                acc += xat(n, c, static_cast<long>(i + p) - 1, static_cast<long>(j + q) - 1) *
                       w[((f * C + c) * 3 + p) * 3 + q];
          out[((n * F + f) * H + i) * W + j] = acc;
        }
  return detail::make_op<T>("conv2d", Shape{N, F, H, W}, std::move(out), {x, w, b},
      [x, w, N, C, H, W, F](const Tensor<T>& u) {
        std::vector<T> dx(N * C * H * W, T(0));
        std::vector<T> dw(F * C * 9, T(0));
        std::vector<T> db(F, T(0));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t f = 0; f < F; ++f)
            for (std::size_t i = 0; i < H; ++i)
              for (std::size_t j = 0; j < W; ++j) {
                T g = u[((n * F + f) * H + i) * W + j];
                if (g == T(0)) continue;
                db[f] += g;
                for (std::size_t c = 0; c < C; ++c)
                  for (std::size_t p = 0; p < 3; ++p)
                    for (std::size_t q = 0; q < 3; ++q) {
                      long a = static_cast<long>(i + p) - 1;
                      long bb = static_cast<long>(j + q) - 1;
                      if (a < 0 || bb < 0 || a >= static_cast<long>(H) ||
                          bb >= static_cast<long>(W))
                        continue;
                      T xv = x[((n * C + c) * H + a) * W + bb];
                      dw[((f * C + c) * 3 + p) * 3 + q] += g * xv;
                      dx[((n * C + c) * H + a) * W + bb] += g * w[((f * C + c) * 3 + p) * 3 + q];
                    }
              }
        return std::vector<Tensor<T>>{Tensor<T>(Shape{N, C, H, W}, std::move(dx)),
                                      Tensor<T>(Shape{F, C, 3, 3}, std::move(dw)),
                                      Tensor<T>(Shape{F}, std::move(db))};
      });
}

// 2x2 max pooling, stride 2, floor on odd extents.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  if (x.shape().size() != 4) throw ShapeError("maxpool2d: shape " + shape_str(x.shape()));
  std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::size_t Ho = H / 2, Wo = W / 2;
  if (Ho == 0 || Wo == 0) throw ShapeError("maxpool2d: spatial extent too small " + shape_str(x.shape()));
  std::vector<T> out(N * C * Ho * Wo);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          T best = x[((n * C + c) * H + 2 * i) * W + 2 * j];
          for (std::size_t p = 0; p < 2; ++p)
            for (std::size_t q = 0; q < 2; ++q)
              best = std::max(best, x[((n * C + c) * H + 2 * i + p) * W + 2 * j + q]);
          out[((n * C + c) * Ho + i) * Wo + j] = best;
        }
  return detail::make_op<T>("maxpool2d", Shape{N, C, Ho, Wo}, std::move(out), {x},
      [x, N, C, H, W, Ho, Wo](const Tensor<T>& u) {
        std::vector<T> dx(N * C * H * W, T(0));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < Ho; ++i)
              for (std::size_t j = 0; j < Wo; ++j) {
                std::size_t bi = 2 * i, bj = 2 * j;
                T best = x[((n * C + c) * H + bi) * W + bj];
                for (std::size_t p = 0; p < 2; ++p)
                  for (std::size_t q = 0; q < 2; ++q) {
                    T v = x[((n * C + c) * H + 2 * i + p) * W + 2 * j + q];
                    if (v > best) { best = v; bi = 2 * i + p; bj = 2 * j + q; }
                  }
                dx[((n * C + c) * H + bi) * W + bj] += u[((n * C + c) * Ho + i) * Wo + j];
              }
        return std::vector<Tensor<T>>{Tensor<T>(Shape{N, C, H, W}, std::move(dx))};
      });
}

// Per-channel normalization with current-batch statistics (no running
// averages); scale [C], shift [C].
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  if (x.shape().size() != 4 || scale.shape().size() != 1 || shift.shape().size() != 1 ||
      scale.shape()[0] != x.shape()[1] || shift.shape()[0] != x.shape()[1])
    throw ShapeError("batchnorm2d: shape " + shape_str(x.shape()) + " vs " +
                     shape_str(scale.shape()));
  std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::size_t m = N * H * W;
  std::vector<T> mu(C, T(0)), var(C, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < H * W; ++s) mu[c] += x[(n * C + c) * H * W + s];
  for (std::size_t c = 0; c < C; ++c) mu[c] /= static_cast<T>(m);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < H * W; ++s) {
        T d = x[(n * C + c) * H * W + s] - mu[c];
        var[c] += d * d;
      }
  for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<T>(m);
  std::vector<T> out(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T inv = T(1) / std::sqrt(var[c] + static_cast<T>(kBatchNormEps));
      for (std::size_t s = 0; s < H * W; ++s) {
        std::size_t idx = (n * C + c) * H * W + s;
        out[idx] = scale[c] * (x[idx] - mu[c]) * inv + shift[c];
      }
    }
  return detail::make_op<T>("batchnorm2d", x.shape(), std::move(out), {x, scale, shift},
      [x, scale, mu, var, N, C, H, W, m](const Tensor<T>& u) {
        std::vector<T> dx(x.size(), T(0)), dscale(C, T(0)), dshift(C, T(0));
        for (std::size_t c = 0; c < C; ++c) {
          T inv = T(1) / std::sqrt(var[c] + static_cast<T>(kBatchNormEps));
          T sum_u = 0, sum_uxh = 0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < H * W; ++s) {
              std::size_t idx = (n * C + c) * H * W + s;
              T xh = (x[idx] - mu[c]) * inv;
              sum_u += u[idx];
              sum_uxh += u[idx] * xh;
            }
          dshift[c] = sum_u;
          dscale[c] = sum_uxh;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < H * W; ++s) {
              std::size_t idx = (n * C + c) * H * W + s;
              T xh = (x[idx] - mu[c]) * inv;
              dx[idx] = scale[c] * inv / static_cast<T>(m) *
                        (static_cast<T>(m) * u[idx] - sum_u - xh * sum_uxh);
            }
        }
        return std::vector<Tensor<T>>{Tensor<T>(x.shape(), std::move(dx)),
                                      Tensor<T>(Shape{C}, std::move(dscale)),
                                      Tensor<T>(Shape{C}, std::move(dshift))};
      });
}

// ---- backward pass ----

// Gradients of a scalar root w.r.t. the given leaves. With create_graph
// the returned gradients are themselves recorded and differentiable.
// Unreached (but grad-enabled) leaves get zero gradients.
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& root, const std::vector<Tensor<T>>& wrt,
                            bool create_graph = false) {
  if (!root.defined() || root.size() != 1)
    throw UsageError("backward: root must be a scalar tensor");
  if (!root.requires_grad())
    throw UsageError("backward: root is detached from the graph");
  for (std::size_t i = 0; i < wrt.size(); ++i)
    if (!wrt[i].defined() || !wrt[i].requires_grad())
      throw UsageError("backward: parameter #" + std::to_string(i) +
                       " is detached from the graph");

  // Topological order over grad-tracked nodes (iterative post-order).
  std::vector<Node<T>*> topo;
  std::unordered_set<Node<T>*> seen;
  if (root.requires_grad()) {
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node<T>* p = n->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        topo.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  std::unordered_map<Node<T>*, Tensor<T>> grads;
  grads[root.node()] = Tensor<T>::scalar(T(1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node<T>* n = *it;
    auto gi = grads.find(n);
    if (gi == grads.end() || !n->backward) continue;
    std::vector<Tensor<T>> pg = n->backward(gi->second);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node<T>* p = n->parents[i].get();
      if (!p->requires_grad || !pg[i].defined()) continue;
      auto existing = grads.find(p);
      if (existing == grads.end())
        grads.emplace(p, pg[i]);
      else
        existing->second = add(existing->second, pg[i]);
    }
  }

  std::vector<Tensor<T>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.node());
    out.push_back(it != grads.end() ? it->second : Tensor<T>::zeros(w.shape()));
  }
  return out;
}

}  // namespace metafit
