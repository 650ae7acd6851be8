#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "metafit/errors.hpp"
#include "metafit/param.hpp"
#include "metafit/rng.hpp"
#include "metafit/tensor.hpp"

// Model zoo: a 4-block convolutional classifier (3x3 conv, batchnorm,
// relu, 2x2 maxpool per block, linear head to 2 logits) and a small
// relu MLP for low-dimensional tasks. Both are pure functions of an
// ArchSpec and a ParamSet.

namespace metafit::nn {

enum class ArchId { conv4, mlp };

inline std::string arch_name(ArchId id) { return id == ArchId::conv4 ? "conv4" : "mlp"; }

inline ArchId arch_from_name(const std::string& s) {
  if (s == "conv4") return ArchId::conv4;
  if (s == "mlp") return ArchId::mlp;
  throw ConfigError("arch: unknown id '" + s + "'");
}

struct ArchSpec {
  ArchId id = ArchId::mlp;
  Shape input_shape;                // mlp: {dim}; conv4: {C, H, W}
  std::vector<std::size_t> widths;  // mlp: hidden widths; conv4: {filters}
  std::size_t classes = 2;

  void validate() const {
    for (std::size_t e : input_shape)
      if (e == 0) throw ConfigError("arch: zero extent in input shape " + shape_str(input_shape));
    if (widths.empty()) throw ConfigError("arch: empty width list");
    for (std::size_t w : widths)
      if (w == 0) throw ConfigError("arch: zero width");
    if (id == ArchId::mlp && input_shape.size() != 1)
      throw ConfigError("arch: mlp expects rank-1 input, got " + shape_str(input_shape));
    if (id == ArchId::conv4) {
      if (input_shape.size() != 3)
        throw ConfigError("arch: conv4 expects CxHxW input, got " + shape_str(input_shape));
      if (widths.size() != 1) throw ConfigError("arch: conv4 takes a single filter width");
      // Four pooling stages.
      if (input_shape[1] / 16 == 0 || input_shape[2] / 16 == 0)
        throw ConfigError("arch: conv4 input too small for 4 pooling stages");
    }
    if (classes != 2) throw ConfigError("arch: classifier head is fixed at 2 classes");
  }
};

inline ArchSpec mlp_spec(std::size_t input_dim, std::vector<std::size_t> hidden) {
  return ArchSpec{ArchId::mlp, Shape{input_dim}, std::move(hidden), 2};
}

inline ArchSpec conv4_spec(std::size_t channels = 3, std::size_t height = 84,
                           std::size_t width = 84, std::size_t filters = 64) {
  return ArchSpec{ArchId::conv4, Shape{channels, height, width}, {filters}, 2};
}

// Spatial extent after the four conv/pool blocks (conv keeps size,
// pool halves with floor).
inline std::pair<std::size_t, std::size_t> conv4_spatial(const ArchSpec& spec) {
  std::size_t h = spec.input_shape[1], w = spec.input_shape[2];
  for (int i = 0; i < 4; ++i) {
    h /= 2;
    w /= 2;
  }
  return {h, w};
}

inline std::size_t feature_dim(const ArchSpec& spec) {
  if (spec.id == ArchId::mlp) return spec.widths.back();
  auto [h, w] = conv4_spatial(spec);
  return spec.widths[0] * h * w;
}

inline std::size_t param_count(const ArchSpec& spec) {
  spec.validate();
  std::size_t n = 0;
  if (spec.id == ArchId::mlp) {
    std::size_t in = spec.input_shape[0];
    for (std::size_t w : spec.widths) {
      n += in * w + w;
      in = w;
    }
    n += in * spec.classes + spec.classes;
  } else {
    std::size_t cin = spec.input_shape[0], f = spec.widths[0];
    for (int b = 0; b < 4; ++b) {
      n += f * cin * 9 + f;  // conv weight + bias
      n += 2 * f;            // batchnorm scale + shift
      cin = f;
    }
    n += feature_dim(spec) * spec.classes + spec.classes;
  }
  return n;
}

namespace detail {

template <typename T>
Tensor<T> uniform_init(Rng& rng, Shape shape, std::size_t fan_in) {
  T lim = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-lim, lim));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

}  // namespace detail

// Weights uniform in +-sqrt(6 / fan_in); biases zero; batchnorm scale 1
// and shift 0. Deterministic in the seed (fixed draw order).
template <typename T>
ParamSet<T> init_params(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamSet<T> p;
  if (spec.id == ArchId::mlp) {
    std::size_t in = spec.input_shape[0];
    for (std::size_t l = 0; l < spec.widths.size(); ++l) {
      std::size_t out = spec.widths[l];
      std::string base = "fc" + std::to_string(l + 1);
      p.add(base + ".w", detail::uniform_init<T>(rng, Shape{in, out}, in));
      p.add(base + ".b", Tensor<T>::zeros(Shape{out}, true));
      in = out;
    }
    p.add("head.w", detail::uniform_init<T>(rng, Shape{in, spec.classes}, in));
    p.add("head.b", Tensor<T>::zeros(Shape{spec.classes}, true));
  } else {
    std::size_t cin = spec.input_shape[0], f = spec.widths[0];
    for (int b = 0; b < 4; ++b) {
      std::string base = "block" + std::to_string(b + 1);
      p.add(base + ".conv.w", detail::uniform_init<T>(rng, Shape{f, cin, 3, 3}, cin * 9));
      p.add(base + ".conv.b", Tensor<T>::zeros(Shape{f}, true));
      p.add(base + ".bn.scale", Tensor<T>::full(Shape{f}, T(1)).leaf());
      p.add(base + ".bn.shift", Tensor<T>::zeros(Shape{f}, true));
      cin = f;
    }
    std::size_t fd = feature_dim(spec);
    p.add("head.w", detail::uniform_init<T>(rng, Shape{fd, spec.classes}, fd));
    p.add("head.b", Tensor<T>::zeros(Shape{spec.classes}, true));
  }
  return p;
}

namespace detail {

template <typename T>
void check_batch(const ArchSpec& spec, const Tensor<T>& batch) {
  Shape expect = spec.input_shape;
  const Shape& got = batch.shape();
  bool ok = got.size() == expect.size() + 1;
  for (std::size_t i = 0; ok && i < expect.size(); ++i) ok = got[i + 1] == expect[i];
  if (!ok)
    throw ShapeError("forward: batch shape " + shape_str(got) + " does not match arch input " +
                     shape_str(expect));
}

// Penultimate activations, flattened to [N, F].
template <typename T>
Tensor<T> backbone(const ArchSpec& spec, const ParamSet<T>& params, const Tensor<T>& batch) {
  check_batch(spec, batch);
  if (spec.id == ArchId::mlp) {
    Tensor<T> h = batch;
    for (std::size_t l = 0; l < spec.widths.size(); ++l) {
      std::string base = "fc" + std::to_string(l + 1);
      h = relu(add_bias(matmul(h, params.at(base + ".w")), params.at(base + ".b")));
    }
    return h;
  }
  Tensor<T> h = batch;
  for (int b = 0; b < 4; ++b) {
    std::string base = "block" + std::to_string(b + 1);
    h = conv2d(h, params.at(base + ".conv.w"), params.at(base + ".conv.b"));
    h = batchnorm2d(h, params.at(base + ".bn.scale"), params.at(base + ".bn.shift"));
    h = relu(h);
    h = maxpool2d(h);
  }
  return reshape(h, Shape{batch.shape()[0], feature_dim(spec)});
}

}  // namespace detail

// Logits [N, 2], differentiable w.r.t. params.
template <typename T>
Tensor<T> forward(const ArchSpec& spec, const ParamSet<T>& params, const Tensor<T>& batch) {
  Tensor<T> h = detail::backbone(spec, params, batch);
  return add_bias(matmul(h, params.at("head.w")), params.at("head.b"));
}

// Penultimate embedding [N, F] (for feature-based baselines).
template <typename T>
Tensor<T> features(const ArchSpec& spec, const ParamSet<T>& params, const Tensor<T>& batch) {
  return detail::backbone(spec, params, batch);
}

// Class-1 softmax probability per row, the ranking score used everywhere.
template <typename T>
Tensor<T> class1_prob(const Tensor<T>& logits) {
  return select_col(softmax(logits), 1);
}

}  // namespace metafit::nn
