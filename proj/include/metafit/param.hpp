#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "metafit/errors.hpp"
#include "metafit/tensor.hpp"

namespace metafit {

// Ordered name -> Tensor map. Holds model parameters and gradient maps;
// insertion order is the canonical iteration order everywhere (updates,
// serialization, reductions), which keeps runs reproducible.
template <typename T>
class ParamSet {
 public:
  void add(std::string name, Tensor<T> t) {
    if (contains(name)) throw UsageError("paramset: duplicate name '" + name + "'");
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
  }

  bool contains(const std::string& name) const {
    for (const auto& n : names_)
      if (n == name) return true;
    return false;
  }

  const Tensor<T>& at(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return tensors_[i];
    throw UsageError("paramset: missing entry '" + name + "'");
  }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor<T>& tensor(std::size_t i) const { return tensors_[i]; }
  Tensor<T>& tensor(std::size_t i) { return tensors_[i]; }

  std::size_t num_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  // Fresh leaf copies (constant when requires_grad is false).
  ParamSet clone_leaves(bool requires_grad) const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i)
      out.add(names_[i], Tensor<T>(tensors_[i].shape(), tensors_[i].data(), requires_grad));
    return out;
  }

  ParamSet detached() const { return clone_leaves(false); }

  bool all_finite() const {
    for (const auto& t : tensors_)
      if (!t.all_finite()) return false;
    return true;
  }

  bool same_layout(const ParamSet& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (names_[i] != other.names_[i] || tensors_[i].shape() != other.tensors_[i].shape())
        return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
};

// Gradient of a scalar root w.r.t. every parameter, by name.
template <typename T>
ParamSet<T> grad(const Tensor<T>& root, const ParamSet<T>& wrt, bool create_graph = false) {
  for (std::size_t i = 0; i < wrt.size(); ++i)
    if (!wrt.tensor(i).requires_grad())
      throw UsageError("backward: parameter '" + wrt.name(i) + "' is detached from the graph");
  std::vector<Tensor<T>> leaves;
  leaves.reserve(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) leaves.push_back(wrt.tensor(i));
  std::vector<Tensor<T>> gs = grad(root, leaves, create_graph);
  ParamSet<T> out;
  for (std::size_t i = 0; i < wrt.size(); ++i) out.add(wrt.name(i), gs[i]);
  return out;
}

// Compares reverse-mode gradients of fn (ParamSet -> scalar Tensor)
// against central finite differences, coordinate by coordinate. Returns
// the worst relative error with denominator max(|a|, |b|, 1e-8).
template <typename T, typename F>
T gradcheck(F&& fn, const ParamSet<T>& point, T step) {
  if (!(step > T(0))) throw UsageError("gradcheck: step must be positive");
  ParamSet<T> p = point.clone_leaves(true);
  Tensor<T> y = fn(p);
  if (!std::isfinite(static_cast<double>(y.item())))
    throw NumericError("gradcheck: non-finite function value");
  ParamSet<T> g = grad(y, p, false);

  T worst = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p.tensor(i).size(); ++j) {
      auto eval_shifted = [&](T delta) {
        ParamSet<T> q = point.clone_leaves(true);
        std::vector<T> d = q.tensor(i).data();
        d[j] += delta;
        q.tensor(i) = Tensor<T>(q.tensor(i).shape(), std::move(d), true);
        T v = fn(q).item();
        if (!std::isfinite(static_cast<double>(v)))
          throw NumericError("gradcheck: non-finite function value at shifted point");
        return v;
      };
      T fd = (eval_shifted(step) - eval_shifted(-step)) / (T(2) * step);
      T a = g.tensor(i)[j];
      T denom = std::max({std::abs(a), std::abs(fd), T(1e-8)});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

}  // namespace metafit
