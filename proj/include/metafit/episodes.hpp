#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include "metafit/errors.hpp"
#include "metafit/io.hpp"
#include "metafit/rng.hpp"
#include "metafit/tensor.hpp"

// Datasets and the 2-way k-shot episodic protocol: class pools, the
// synthetic Gaussian task generator, image augmentation, and the
// support/query episode sampler. Datasets are immutable after
// construction; every sampling call takes an explicit Rng.

namespace metafit::episodes {

enum class Role { meta_train, meta_test };

template <typename T>
struct Sample {
  Tensor<T> payload;
  std::uint64_t source_id = 0;
};

template <typename T>
struct Dataset {
  struct ClassEntry {
    std::string id;
    std::vector<Sample<T>> samples;
  };
  std::vector<ClassEntry> classes;
  Role role = Role::meta_train;

  std::size_t num_classes() const { return classes.size(); }
};

template <typename T>
struct Episode {
  std::array<std::string, 2> class_ids;  // label 0, label 1
  std::vector<Sample<T>> support;
  std::vector<int> support_labels;
  std::vector<Sample<T>> query;
  std::vector<int> query_labels;
};

struct AugmentPolicy {
  bool enabled = false;
  double rot_degrees = 30.0;   // rotation range +- degrees
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double scale_min = 0.8;
  double scale_max = 1.2;

  void validate() const {
    if (!enabled) return;
    if (rot_degrees < 0) throw ConfigError("augment: negative rotation range");
    if (hflip_prob < 0 || hflip_prob > 1 || vflip_prob < 0 || vflip_prob > 1)
      throw ConfigError("augment: flip probability outside [0,1]");
    if (!(scale_min > 0) || !(scale_max >= scale_min))
      throw ConfigError("augment: degenerate scale range");
  }
};

// ---- validation ----

template <typename T>
void validate_protocol(const Dataset<T>& ds, std::size_t k, std::size_t q) {
  if (ds.num_classes() < 2)
    throw DataError("dataset has " + std::to_string(ds.num_classes()) +
                    " classes; episodic protocol needs at least 2");
  for (const auto& c : ds.classes)
    if (c.samples.size() < k + q)
      throw DataError("class '" + c.id + "' has " + std::to_string(c.samples.size()) +
                      " samples; protocol needs k+q=" + std::to_string(k + q));
}

template <typename T>
void validate_disjoint(const Dataset<T>& train, const Dataset<T>& test) {
  std::unordered_set<std::string> ids;
  for (const auto& c : train.classes) ids.insert(c.id);
  for (const auto& c : test.classes)
    if (ids.count(c.id))
      throw DataError("class id '" + c.id + "' appears in both meta-train and meta-test pools");
}

// ---- synthetic task distribution ----

// Each class is an anisotropic Gaussian cluster: mean with norm in
// [1, 3], per-axis scales in [0.3, 1.0]. Meta-train means live in the
// first-axis-positive half space; meta-test means in the opposite one,
// so meta-test classes occupy a region never seen during meta-training.
template <typename T>
std::pair<Dataset<T>, Dataset<T>> synth_pools(std::uint64_t seed, std::size_t n_train_classes,
                                              std::size_t n_test_classes,
                                              std::size_t samples_per_class, std::size_t dim) {
  if (n_train_classes == 0 || n_test_classes == 0 || samples_per_class == 0)
    throw ConfigError("synth: all counts must be positive");
  if (dim < 2) throw ConfigError("synth: dim must be at least 2");
  Rng rng(seed);
  std::uint64_t next_source = 0;

  // Keep every class pair in a pool linearly separable: the separation
  // along the discriminant direction, normalised by both classes' noise
  // (a two-class d'), must clear this floor. A Euclidean floor would
  // have to be far larger to cover the worst-case noise axis, making
  // the pools too easy for nearest-neighbour baselines.
  const double kMinDPrime = 2.2;
  std::vector<std::vector<double>> pool_means;
  std::vector<std::vector<double>> pool_scales;

  auto draw_mean = [&](bool test_side) {
    // Random direction, then norm in [1,3]; first axis sign fixes the side.
    std::vector<double> mean(dim);
    double norm = 0;
    for (auto& m : mean) {
      m = rng.normal();
      norm += m * m;
    }
    norm = std::sqrt(norm);
    double target = rng.uniform(1.0, 3.0);
    for (auto& m : mean) m *= target / norm;
    mean[0] = test_side ? -std::abs(mean[0]) : std::abs(mean[0]);
    return mean;
  };

  auto make_class = [&](const std::string& id, bool test_side) {
    typename Dataset<T>::ClassEntry entry;
    entry.id = id;
    std::vector<double> scale(dim);
    for (auto& s : scale) s = rng.uniform(0.3, 1.0);
    // Rejection-sample the mean against the pool; on exhaustion keep
    // the most separable candidate seen (still deterministic in seed).
    std::vector<double> mean;
    double best = -1;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<double> cand = draw_mean(test_side);
      double nearest = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < pool_means.size(); ++j) {
        double d2 = 0;
        for (std::size_t i = 0; i < dim; ++i) {
          double diff = cand[i] - pool_means[j][i];
          d2 += diff * diff / (scale[i] * scale[i] + pool_scales[j][i] * pool_scales[j][i]);
        }
        nearest = std::min(nearest, std::sqrt(d2));
      }
      if (nearest > best) {
        best = nearest;
        mean = std::move(cand);
      }
      if (best >= kMinDPrime) break;
    }
    pool_means.push_back(mean);
    pool_scales.push_back(scale);
    for (std::size_t i = 0; i < samples_per_class; ++i) {
      std::vector<T> v(dim);
      for (std::size_t d = 0; d < dim; ++d)
        v[d] = static_cast<T>(mean[d] + scale[d] * rng.normal());
      entry.samples.push_back({Tensor<T>(Shape{dim}, std::move(v)), next_source++});
    }
    return entry;
  };

  Dataset<T> train;
  train.role = Role::meta_train;
  for (std::size_t c = 0; c < n_train_classes; ++c) {
    char id[32];
    std::snprintf(id, sizeof id, "class_%02zu", c);
    train.classes.push_back(make_class(id, false));
  }
  pool_means.clear();  // separation is enforced within each pool
  pool_scales.clear();
  Dataset<T> test;
  test.role = Role::meta_test;
  for (std::size_t c = 0; c < n_test_classes; ++c) {
    char id[32];
    std::snprintf(id, sizeof id, "class_%02zu", n_train_classes + c);
    test.classes.push_back(make_class(id, true));
  }
  return {std::move(train), std::move(test)};
}

// ---- episode sampling ----

// Uniform unordered class pair with randomized label order; k support
// and q query samples per class, drawn without replacement.
template <typename T>
Episode<T> sample_episode(const Dataset<T>& ds, std::size_t k, std::size_t q, Rng& rng) {
  if (ds.num_classes() < 2) throw DataError("sample_episode: dataset has fewer than 2 classes");
  std::size_t a = rng.below(ds.num_classes());
  std::size_t b = rng.below(ds.num_classes() - 1);
  if (b >= a) ++b;

  Episode<T> ep;
  ep.class_ids = {ds.classes[a].id, ds.classes[b].id};
  std::array<std::size_t, 2> cls{a, b};
  for (int label = 0; label < 2; ++label) {
    const auto& pool = ds.classes[cls[label]].samples;
    if (pool.size() < k + q)
      throw DataError("sample_episode: class '" + ds.classes[cls[label]].id + "' has " +
                      std::to_string(pool.size()) + " samples; needs k+q=" +
                      std::to_string(k + q));
    // Partial Fisher-Yates for the first k+q positions.
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < k + q; ++i)
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    for (std::size_t i = 0; i < k; ++i) {
      ep.support.push_back(pool[idx[i]]);
      ep.support_labels.push_back(label);
    }
    for (std::size_t i = k; i < k + q; ++i) {
      ep.query.push_back(pool[idx[i]]);
      ep.query_labels.push_back(label);
    }
  }
  return ep;
}

// ---- image augmentation ----

namespace detail {

template <typename T>
void require_image(const Tensor<T>& t, const char* op) {
  if (t.shape().size() != 3)
    throw UsageError(std::string(op) + ": expected CxHxW image, got " + shape_str(t.shape()));
}

}  // namespace detail

// Rotation about the image center, nearest-neighbor resample, zero fill.
template <typename T>
Tensor<T> rotate_image(const Tensor<T>& img, double degrees) {
  detail::require_image(img, "rotate_image");
  std::size_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
  double th = degrees * std::numbers::pi / 180.0;
  double c = std::cos(th), s = std::sin(th);
  double cy = (static_cast<double>(H) - 1) / 2.0, cx = (static_cast<double>(W) - 1) / 2.0;
  std::vector<T> out(img.size(), T(0));
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      // Inverse map: rotate the output coordinate back into the source.
      double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
      long si = std::lround(cy + c * dy + s * dx);
      long sj = std::lround(cx - s * dy + c * dx);
      if (si < 0 || sj < 0 || si >= static_cast<long>(H) || sj >= static_cast<long>(W)) continue;
      for (std::size_t ch = 0; ch < C; ++ch)
        out[(ch * H + i) * W + j] = img[(ch * H + si) * W + sj];
    }
  return Tensor<T>(img.shape(), std::move(out));
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  detail::require_image(img, "flip_horizontal");
  std::size_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
  std::vector<T> out(img.size());
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        out[(ch * H + i) * W + j] = img[(ch * H + i) * W + (W - 1 - j)];
  return Tensor<T>(img.shape(), std::move(out));
}

template <typename T>
Tensor<T> flip_vertical(const Tensor<T>& img) {
  detail::require_image(img, "flip_vertical");
  std::size_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
  std::vector<T> out(img.size());
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        out[(ch * H + i) * W + j] = img[(ch * H + (H - 1 - i)) * W + j];
  return Tensor<T>(img.shape(), std::move(out));
}

// Nearest-neighbor resize to the given extents.
template <typename T>
Tensor<T> resize_image(const Tensor<T>& img, std::size_t new_h, std::size_t new_w) {
  detail::require_image(img, "resize_image");
  std::size_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
  if (new_h == 0 || new_w == 0) throw UsageError("resize_image: zero target extent");
  std::vector<T> out(C * new_h * new_w);
  for (std::size_t i = 0; i < new_h; ++i)
    for (std::size_t j = 0; j < new_w; ++j) {
      std::size_t si = std::min(H - 1, static_cast<std::size_t>(
          (static_cast<double>(i) + 0.5) * static_cast<double>(H) / static_cast<double>(new_h)));
      std::size_t sj = std::min(W - 1, static_cast<std::size_t>(
          (static_cast<double>(j) + 0.5) * static_cast<double>(W) / static_cast<double>(new_w)));
      for (std::size_t ch = 0; ch < C; ++ch)
        out[(ch * new_h + i) * new_w + j] = img[(ch * H + si) * W + sj];
    }
  return Tensor<T>(Shape{C, new_h, new_w}, std::move(out));
}

// Resize by the given factor, then center-crop (or zero-pad) back to
// the original extents.
template <typename T>
Tensor<T> scale_with_crop(const Tensor<T>& img, double factor) {
  detail::require_image(img, "scale_with_crop");
  std::size_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];
  std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(H * factor)));
  std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(W * factor)));
  if (sh == H && sw == W) return img.detach();
  Tensor<T> scaled = resize_image(img, sh, sw);
  std::vector<T> out(img.size(), T(0));
  long off_i = (static_cast<long>(sh) - static_cast<long>(H)) / 2;
  long off_j = (static_cast<long>(sw) - static_cast<long>(W)) / 2;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      long si = static_cast<long>(i) + off_i, sj = static_cast<long>(j) + off_j;
      if (si < 0 || sj < 0 || si >= static_cast<long>(sh) || sj >= static_cast<long>(sw)) continue;
      for (std::size_t ch = 0; ch < C; ++ch)
        out[(ch * H + i) * W + j] = scaled[(ch * sh + si) * sw + sj];
    }
  return Tensor<T>(img.shape(), std::move(out));
}

// Random rotation, coin flips, random scale with center crop, in order.
template <typename T>
Tensor<T> augment(const Tensor<T>& sample, const AugmentPolicy& policy, Rng& rng) {
  detail::require_image(sample, "augment");
  policy.validate();
  if (!policy.enabled) return sample;
  Tensor<T> img = rotate_image(sample, rng.uniform(-policy.rot_degrees, policy.rot_degrees));
  if (rng.coin(policy.hflip_prob)) img = flip_horizontal(img);
  if (rng.coin(policy.vflip_prob)) img = flip_vertical(img);
  img = scale_with_crop(img, rng.uniform(policy.scale_min, policy.scale_max));
  return img;
}

// ---- directory ingestion ----

// One subdirectory per class holding PNG or .npt files. Images are
// scaled to [0,1] and resized to image_shape (C,H,W) when given; class
// ids are subdirectory names in lexicographic order.
template <typename T>
Dataset<T> load_directory(const std::filesystem::path& path, Role role,
                          const std::optional<Shape>& image_shape = std::nullopt) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw DataError("not a directory: " + path.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError("no class subdirectories in " + path.string());

  Dataset<T> ds;
  ds.role = role;
  std::uint64_t next_source = 0;
  for (const auto& dir : class_dirs) {
    typename Dataset<T>::ClassEntry entry;
    entry.id = dir.filename().string();
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Tensor<T> t;
      std::string ext = f.extension().string();
      if (ext == ".png") {
        io::PngImage img = io::read_png(f);
        std::vector<T> data(img.channels * img.height * img.width);
        for (std::size_t ch = 0; ch < img.channels; ++ch)
          for (std::size_t i = 0; i < img.height; ++i)
            for (std::size_t j = 0; j < img.width; ++j)
              data[(ch * img.height + i) * img.width + j] =
                  static_cast<T>(img.pixels[(i * img.width + j) * img.channels + ch]) / T(255);
        t = Tensor<T>(Shape{img.channels, img.height, img.width}, std::move(data));
      } else if (ext == ".npt") {
        t = io::read_npt<T>(f);
      } else {
        continue;  // manifests etc.
      }
      if (image_shape && t.shape().size() == 3) {
        const Shape& target = *image_shape;
        if (t.shape()[0] == 1 && target[0] == 3) {
          // Replicate grayscale to three channels.
          std::vector<T> rgb(3 * t.shape()[1] * t.shape()[2]);
          for (int ch = 0; ch < 3; ++ch)
            std::copy(t.data().begin(), t.data().end(),
                      rgb.begin() + ch * t.shape()[1] * t.shape()[2]);
          t = Tensor<T>(Shape{3, t.shape()[1], t.shape()[2]}, std::move(rgb));
        }
        if (t.shape()[0] != target[0])
          throw DataError("file " + f.string() + " has " + std::to_string(t.shape()[0]) +
                          " channels; expected " + std::to_string(target[0]));
        if (t.shape()[1] != target[1] || t.shape()[2] != target[2])
          t = resize_image(t, target[1], target[2]);
      }
      entry.samples.push_back({std::move(t), next_source++});
    }
    if (entry.samples.empty()) throw DataError("class directory is empty: " + dir.string());
    ds.classes.push_back(std::move(entry));
  }
  return ds;
}

// Write a dataset as an .npt tree (one subdirectory per class).
template <typename T>
void export_npt_tree(const Dataset<T>& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  for (const auto& c : ds.classes) {
    fs::path dir = root / c.id;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
      char name[24];
      std::snprintf(name, sizeof name, "s_%04zu.npt", i);
      io::write_npt(dir / name, c.samples[i].payload);
    }
  }
}

// ---- batch assembly ----

template <typename T>
Tensor<T> stack_samples(const std::vector<Sample<T>>& samples) {
  if (samples.empty()) throw UsageError("stack_samples: empty batch");
  const Shape& inner = samples[0].payload.shape();
  Shape shape{samples.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<T> data;
  data.reserve(shape_numel(shape));
  for (const auto& s : samples) {
    if (s.payload.shape() != inner)
      throw ShapeError("stack_samples: mixed shapes " + shape_str(inner) + " vs " +
                       shape_str(s.payload.shape()));
    data.insert(data.end(), s.payload.data().begin(), s.payload.data().end());
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> label_tensor(const std::vector<int>& labels) {
  std::vector<T> data(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) data[i] = static_cast<T>(labels[i]);
  return Tensor<T>(Shape{labels.size()}, std::move(data));
}

}  // namespace metafit::episodes
