#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "metafit/errors.hpp"
#include "metafit/nn.hpp"
#include "metafit/param.hpp"
#include "metafit/tensor.hpp"

// The meta-objective: per-task cross-entropy, inner-loop gradient
// adaptation, the difficulty-aware task weighting
//   L^eta * (-log(max(epsilon, 1 - L)))
// summed over the task batch, and the meta update (Adam by default,
// plain SGD available). All functions are pure; optimizer state is an
// explicit value.

namespace metafit::meta {

enum class Reduction { mean, sum };

inline Reduction reduction_from_name(const std::string& s) {
  if (s == "mean") return Reduction::mean;
  if (s == "sum") return Reduction::sum;
  throw ConfigError("loss_reduction: unknown value '" + s + "'");
}

inline std::string reduction_name(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }

struct MetaConfig {
  double eta = 5.0;       // difficulty scaling exponent
  double epsilon = 1e-6;  // floor inside the log
  double gamma = 0.05;    // inner-loop adaptation learning rate
  double alpha = 0.001;   // meta learning rate
  std::size_t inner_steps = 5;
  std::size_t k = 5;
  std::size_t q = 15;
  std::size_t tasks_per_batch = 4;
  bool second_order = true;
  Reduction task_loss_reduction = Reduction::mean;

  void validate() const {
    if (eta < 0) throw ConfigError("meta: eta must be >= 0");
    if (!(epsilon > 0) || !(epsilon < 1)) throw ConfigError("meta: epsilon must be in (0,1)");
    if (!(gamma >= 0)) throw ConfigError("meta: gamma must be >= 0");
    if (!(alpha >= 0)) throw ConfigError("meta: alpha must be >= 0");
    if (inner_steps < 1 || k < 1 || q < 1 || tasks_per_batch < 1)
      throw ConfigError("meta: inner_steps, k, q, tasks_per_batch must be >= 1");
  }
};

// Probability clamp keeping cross-entropy finite at the boundary.
inline constexpr double kProbFloor = 1e-12;

// Binary cross-entropy of class-1 probabilities against {0,1} labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const Tensor<T>& labels,
                        Reduction reduction = Reduction::mean) {
  if (probs.size() != labels.size())
    throw UsageError("cross_entropy: " + std::to_string(probs.size()) + " probabilities vs " +
                     std::to_string(labels.size()) + " labels");
  Tensor<T> y = labels.detach();
  Tensor<T> one = Tensor<T>::scalar(T(1));
  Tensor<T> f = clamp_min(probs, static_cast<T>(kProbFloor));
  Tensor<T> fc = clamp_min(sub(one, probs), static_cast<T>(kProbFloor));
  Tensor<T> per = add(mul(y, log(f)), mul(sub(one, y), log(fc)));
  return reduction == Reduction::mean ? neg(mean(per)) : neg(sum(per));
}

// One task's contribution to the meta objective. The clamp is a hard
// gate: past the floor the log term is constant and carries no
// gradient, while the L^eta factor still does.
template <typename T>
Tensor<T> da_task_loss(const Tensor<T>& loss, T eta, T epsilon) {
  if (loss.size() != 1) throw UsageError("da_task_loss: loss must be scalar");
  if (loss.item() < T(0)) throw UsageError("da_task_loss: negative task loss");
  if (eta < T(0)) throw UsageError("da_task_loss: eta must be >= 0");
  if (!(epsilon > T(0)) || !(epsilon < T(1)))
    throw UsageError("da_task_loss: epsilon must be in (0,1)");
  Tensor<T> one = Tensor<T>::scalar(T(1));
  Tensor<T> gate = neg(log(clamp_min(sub(one, loss), epsilon)));
  return mul(pow(loss, eta), gate);
}

template <typename T>
Tensor<T> da_meta_loss(const std::vector<Tensor<T>>& task_losses, T eta, T epsilon) {
  if (task_losses.empty()) throw UsageError("da_meta_loss: empty task batch");
  Tensor<T> acc = da_task_loss(task_losses[0], eta, epsilon);
  for (std::size_t i = 1; i < task_losses.size(); ++i)
    acc = add(acc, da_task_loss(task_losses[i], eta, epsilon));
  return acc;
}

// ---- inner-loop adaptation ----

// Full-batch gradient descent on the support set:
//   params <- params - gamma * d(loss)/d(params), repeated `steps` times.
// With second_order the adapted parameters remain differentiable w.r.t.
// the input parameters; otherwise the inner gradients are treated as
// constants (first-order approximation). The input set is not modified.
template <typename T>
ParamSet<T> inner_adapt(const nn::ArchSpec& spec, const ParamSet<T>& params,
                        const Tensor<T>& support_batch, const Tensor<T>& support_labels,
                        T gamma, std::size_t steps, bool second_order,
                        Reduction reduction = Reduction::mean) {
  if (steps < 1) throw UsageError("inner_adapt: steps must be >= 1");
  ParamSet<T> cur = params;
  Tensor<T> g = Tensor<T>::scalar(gamma);
  for (std::size_t step = 0; step < steps; ++step) {
    Tensor<T> logits = nn::forward(spec, cur, support_batch);
    Tensor<T> loss = cross_entropy(nn::class1_prob(logits), support_labels, reduction);
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw NumericError("inner_adapt: non-finite loss at step " + std::to_string(step));
    ParamSet<T> grads = grad(loss, cur, /*create_graph=*/second_order);
    ParamSet<T> next;
    for (std::size_t i = 0; i < cur.size(); ++i)
      next.add(cur.name(i), sub(cur.tensor(i), mul(grads.tensor(i), g)));
    cur = std::move(next);
  }
  return cur;
}

// Task loss on the query set after adaptation.
template <typename T>
Tensor<T> query_loss(const nn::ArchSpec& spec, const ParamSet<T>& adapted,
                     const Tensor<T>& query_batch, const Tensor<T>& query_labels,
                     Reduction reduction = Reduction::mean) {
  Tensor<T> logits = nn::forward(spec, adapted, query_batch);
  return cross_entropy(nn::class1_prob(logits), query_labels, reduction);
}

// ---- meta update ----

template <typename T>
struct AdamState {
  ParamSet<T> m, v;
  std::uint64_t t = 0;
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);

  static AdamState zeros_like(const ParamSet<T>& params) {
    AdamState s;
    for (std::size_t i = 0; i < params.size(); ++i) {
      s.m.add(params.name(i), Tensor<T>::zeros(params.tensor(i).shape()));
      s.v.add(params.name(i), Tensor<T>::zeros(params.tensor(i).shape()));
    }
    return s;
  }
};

namespace detail {

template <typename T>
const Tensor<T>& grad_entry(const ParamSet<T>& grads, const std::string& name) {
  if (!grads.contains(name))
    throw UsageError("meta_update: missing gradient for parameter '" + name + "'");
  return grads.at(name);
}

}  // namespace detail

// Plain gradient descent: params - alpha * grad. Fresh leaves.
template <typename T>
ParamSet<T> meta_update_sgd(const ParamSet<T>& params, const ParamSet<T>& grads, T alpha) {
  ParamSet<T> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& g = detail::grad_entry(grads, params.name(i));
    std::vector<T> d = params.tensor(i).data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] -= alpha * g[j];
    out.add(params.name(i), Tensor<T>(params.tensor(i).shape(), std::move(d), true));
  }
  return out;
}

template <typename T>
ParamSet<T> meta_update_adam(const ParamSet<T>& params, const ParamSet<T>& grads, T alpha,
                             AdamState<T>& state) {
  state.t += 1;
  T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.t));
  T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.t));
  ParamSet<T> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& g = detail::grad_entry(grads, params.name(i));
    std::vector<T> m = state.m.tensor(i).data();
    std::vector<T> v = state.v.tensor(i).data();
    std::vector<T> d = params.tensor(i).data();
    for (std::size_t j = 0; j < d.size(); ++j) {
      m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g[j] * g[j];
      d[j] -= alpha * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + state.eps);
    }
    state.m.tensor(i) = Tensor<T>(params.tensor(i).shape(), std::move(m));
    state.v.tensor(i) = Tensor<T>(params.tensor(i).shape(), std::move(v));
    out.add(params.name(i), Tensor<T>(params.tensor(i).shape(), std::move(d), true));
  }
  return out;
}

}  // namespace metafit::meta
