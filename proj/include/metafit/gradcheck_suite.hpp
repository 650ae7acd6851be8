#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "metafit/metaloss.hpp"
#include "metafit/nn.hpp"
#include "metafit/param.hpp"
#include "metafit/rng.hpp"
#include "metafit/tensor.hpp"

// Finite-difference verification of every primitive's backward pass,
// plus two composites: binary cross-entropy through the MLP head, and
// the difficulty-aware task loss through one second-order inner
// adaptation step. 64-bit, central differences with step 1e-5,
// tolerance 1e-4 on the relative error.

namespace metafit::check {

struct CheckResult {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 1e-4;
  bool pass = false;
};

namespace detail {

inline Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo, double hi,
                                  bool requires_grad = true) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(d), requires_grad);
}

// Values bounded away from zero (for kinked ops): |v| in [0.2, 1.5].
inline Tensor<double> rand_offzero(Rng& rng, Shape shape) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(0.2, 1.5) * (rng.coin(0.5) ? 1.0 : -1.0);
  return Tensor<double>(std::move(shape), std::move(d), true);
}

// Weighted sum against a fixed random tensor, so the upstream gradient
// is non-uniform.
inline Tensor<double> mix(const Tensor<double>& t, const Tensor<double>& w) {
  return sum(mul(t, w));
}

using Builder =
    std::function<std::pair<std::function<Tensor<double>(const ParamSet<double>&)>,
                            ParamSet<double>>(Rng&)>;

struct Check {
  std::string name;
  Builder build;
  bool composite = false;
};

inline std::vector<Check> primitive_checks() {
  std::vector<Check> checks;
  auto add_check = [&](std::string name, Builder b, bool composite = false) {
    checks.push_back({std::move(name), std::move(b), composite});
  };

  add_check("add", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    p.add("b", rand_tensor(rng, {2, 3}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(add(q.at("a"), q.at("b")), w);
                     }),
                     p};
  });
  add_check("sub", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    p.add("b", rand_tensor(rng, {2, 3}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(sub(q.at("a"), q.at("b")), w);
                     }),
                     p};
  });
  add_check("mul", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    p.add("b", rand_tensor(rng, {2, 3}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(mul(q.at("a"), q.at("b")), w);
                     }),
                     p};
  });
  add_check("div", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    p.add("b", rand_tensor(rng, {2, 3}, 0.5, 2));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(div(q.at("a"), q.at("b")), w);
                     }),
                     p};
  });
  add_check("scalar_broadcast", [](Rng& rng) {
    ParamSet<double> p;
    p.add("s", rand_tensor(rng, {}, 0.5, 2));
    p.add("b", rand_tensor(rng, {4}, 0.5, 2));
    Tensor<double> w = rand_tensor(rng, {4}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       const Tensor<double>&s = q.at("s"), &b = q.at("b");
                       return mix(add(mul(s, b), add(div(s, b), sub(b, s))), w);
                     }),
                     p};
  });
  add_check("neg", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {5}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {5}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) { return mix(neg(q.at("a")), w); }),
                     p};
  });
  add_check("matmul", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -1, 1));
    p.add("b", rand_tensor(rng, {3, 2}, -1, 1));
    Tensor<double> w = rand_tensor(rng, {2, 2}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(matmul(q.at("a"), q.at("b")), w);
                     }),
                     p};
  });
  add_check("transpose", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -1, 1));
    Tensor<double> w = rand_tensor(rng, {3, 2}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(transpose(q.at("a")), w); }), p};
  });
  add_check("add_bias", [](Rng& rng) {
    ParamSet<double> p;
    p.add("x", rand_tensor(rng, {3, 2}, -1, 1));
    p.add("b", rand_tensor(rng, {2}, -1, 1));
    Tensor<double> w = rand_tensor(rng, {3, 2}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(add_bias(q.at("x"), q.at("b")), w);
                     }),
                     p};
  });
  add_check("relu", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_offzero(rng, {2, 3}));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(relu(q.at("a")), w); }), p};
  });
  add_check("sigmoid", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -3, 3));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(sigmoid(q.at("a")), w); }), p};
  });
  add_check("log", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, 0.2, 3));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(log(q.at("a")), w); }), p};
  });
  add_check("exp", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {2, 3}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(exp(q.at("a")), w); }), p};
  });
  add_check("pow", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {4}, 0.3, 2));
    Tensor<double> w = rand_tensor(rng, {4}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(pow(q.at("a"), 2.5), w); }), p};
  });
  add_check("sum", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    return std::pair{std::function([](const ParamSet<double>& q) { return sum(q.at("a")); }), p};
  });
  add_check("mean", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    return std::pair{std::function([](const ParamSet<double>& q) { return mean(q.at("a")); }), p};
  });
  add_check("clamp_min", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_offzero(rng, {6}));
    Tensor<double> w = rand_tensor(rng, {6}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(clamp_min(q.at("a"), 0.0), w); }),
        p};
  });
  add_check("softmax", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 4}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {2, 4}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(softmax(q.at("a")), w); }), p};
  });
  add_check("select_col", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {3, 2}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {3}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(select_col(q.at("a"), 1), w); }),
        p};
  });
  add_check("reshape", [](Rng& rng) {
    ParamSet<double> p;
    p.add("a", rand_tensor(rng, {2, 3}, -2, 2));
    Tensor<double> w = rand_tensor(rng, {6}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(reshape(q.at("a"), Shape{6}), w);
                     }),
                     p};
  });
  add_check("conv2d", [](Rng& rng) {
    ParamSet<double> p;
    p.add("x", rand_tensor(rng, {2, 2, 4, 4}, -1, 1));
    p.add("w", rand_tensor(rng, {2, 2, 3, 3}, -1, 1));
    p.add("b", rand_tensor(rng, {2}, -1, 1));
    Tensor<double> w = rand_tensor(rng, {2, 2, 4, 4}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(conv2d(q.at("x"), q.at("w"), q.at("b")), w);
                     }),
                     p};
  });
  add_check("maxpool2d", [](Rng& rng) {
    ParamSet<double> p;
    p.add("x", rand_tensor(rng, {1, 2, 4, 4}, -1, 1));
    Tensor<double> w = rand_tensor(rng, {1, 2, 2, 2}, -1, 1, false);
    return std::pair{
        std::function([w](const ParamSet<double>& q) { return mix(maxpool2d(q.at("x")), w); }), p};
  });
  add_check("batchnorm2d", [](Rng& rng) {
    ParamSet<double> p;
    p.add("x", rand_tensor(rng, {2, 2, 3, 3}, -1, 1));
    p.add("scale", rand_tensor(rng, {2}, 0.5, 1.5));
    p.add("shift", rand_tensor(rng, {2}, -0.5, 0.5));
    Tensor<double> w = rand_tensor(rng, {2, 2, 3, 3}, -1, 1, false);
    return std::pair{std::function([w](const ParamSet<double>& q) {
                       return mix(batchnorm2d(q.at("x"), q.at("scale"), q.at("shift")), w);
                     }),
                     p};
  });
  return checks;
}

inline std::vector<Check> composite_checks() {
  std::vector<Check> checks;

  // Binary cross-entropy through the MLP head.
  checks.push_back({"mlp_cross_entropy",
                    [](Rng& rng) {
                      nn::ArchSpec spec = nn::mlp_spec(3, {5});
                      ParamSet<double> p =
                          nn::init_params<double>(spec, rng.next_u64());
                      Tensor<double> x = rand_tensor(rng, {4, 3}, -1.5, 1.5, false);
                      Tensor<double> y(Shape{4}, {0, 1, 0, 1});
                      return std::pair{
                          std::function([spec, x, y](const ParamSet<double>& q) {
                            return meta::cross_entropy(
                                nn::class1_prob(nn::forward(spec, q, x)), y);
                          }),
                          p};
                    },
                    true});

  // Difficulty-aware task loss through one second-order adaptation step.
  checks.push_back({"second_order_inner_step",
                    [](Rng& rng) {
                      nn::ArchSpec spec = nn::mlp_spec(3, {6});
                      ParamSet<double> p =
                          nn::init_params<double>(spec, rng.next_u64());
                      Tensor<double> sx = rand_tensor(rng, {4, 3}, -1.5, 1.5, false);
                      Tensor<double> sy(Shape{4}, {0, 0, 1, 1});
                      Tensor<double> qx = rand_tensor(rng, {4, 3}, -1.5, 1.5, false);
                      Tensor<double> qy(Shape{4}, {0, 1, 0, 1});
                      return std::pair{
                          std::function([spec, sx, sy, qx, qy](const ParamSet<double>& q) {
                            ParamSet<double> adapted = meta::inner_adapt(
                                spec, q, sx, sy, 0.1, 1, /*second_order=*/true);
                            Tensor<double> loss = meta::query_loss(spec, adapted, qx, qy);
                            return meta::da_task_loss(loss, 3.0, 1e-6);
                          }),
                          p};
                    },
                    true});
  return checks;
}

}  // namespace detail

// Runs every check `trials` times with derived seeds and reports the
// worst relative error seen per check. `corrupt_op`, when set, scales
// that op's backward by 1.01 (negative control).
inline std::vector<CheckResult> run_suite(std::size_t primitive_trials = 5,
                                          std::size_t composite_trials = 3,
                                          const char* corrupt_op = nullptr,
                                          std::uint64_t seed = 20240901) {
  const char* prev = metafit::detail::corrupt_backward_op;
  metafit::detail::corrupt_backward_op = corrupt_op;
  std::vector<CheckResult> results;
  auto run = [&](const detail::Check& c, std::size_t trials) {
    CheckResult r;
    r.name = c.name;
    Rng master(seed);
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = master.split(t);
      auto [fn, point] = c.build(rng);
      double err = gradcheck<double>(fn, point, 1e-5);
      r.max_rel_err = std::max(r.max_rel_err, err);
    }
    r.pass = r.max_rel_err < r.tolerance;
    results.push_back(std::move(r));
  };
  for (const auto& c : detail::primitive_checks()) run(c, primitive_trials);
  for (const auto& c : detail::composite_checks()) run(c, composite_trials);
  metafit::detail::corrupt_backward_op = prev;
  return results;
}

}  // namespace metafit::check
