#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metafit/episodes.hpp"
#include "metafit/errors.hpp"
#include "metafit/io.hpp"
#include "metafit/metaloss.hpp"
#include "metafit/nn.hpp"
#include "metafit/rng.hpp"

// The meta-training loop: sample a batch of episodes, adapt per task on
// the support set, evaluate query losses, combine them into the meta
// objective (plain sum before the difficulty-aware activation
// iteration, the weighted sum after), and apply the Adam meta update
// under the step learning-rate schedule. Fully deterministic given the
// seed: the per-iteration rng is split from the master seed, so resume
// from a checkpoint replays the exact same sequence.

namespace metafit::train {

struct TrainSchedule {
  std::uint64_t total_iterations = 3000;
  // Iterations >= this use the difficulty-aware objective. A value
  // past total_iterations keeps the plain-sum objective throughout.
  std::uint64_t da_activation_iteration = 1500;
  std::vector<std::uint64_t> lr_decay_iterations{1500, 2500};
  double lr_decay_factor = 0.1;
  std::uint64_t checkpoint_every = 500;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr_decay_factor > 0 && lr_decay_factor < 1))
      throw ConfigError("schedule: lr_decay_factor must be in (0,1)");
  }
};

inline double lr_at(std::uint64_t iteration, const TrainSchedule& sched, double alpha0) {
  double a = alpha0;
  for (std::uint64_t m : sched.lr_decay_iterations)
    if (m <= iteration) a *= sched.lr_decay_factor;
  return a;
}

struct TrainLogRecord {
  std::uint64_t iteration = 0;
  std::vector<double> task_losses;
  double meta_loss = 0;
  double alpha = 0;
  double wall_ms = 0;
};

inline nlohmann::json to_json(const TrainLogRecord& r) {
  return nlohmann::json{{"iteration", r.iteration},
                        {"task_losses", r.task_losses},
                        {"meta_loss", r.meta_loss},
                        {"alpha", r.alpha},
                        {"wall_ms", r.wall_ms}};
}

template <typename T>
struct TrainState {
  ParamSet<T> params;
  meta::AdamState<T> adam;
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;
};

template <typename T>
struct TrainHooks {
  std::ostream* log = nullptr;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::function<void(const TrainLogRecord&)> on_record;
};

// ---- trainer checkpoints (params + optimizer + rng provenance) ----

template <typename T>
void write_train_checkpoint(const std::filesystem::path& path, const nn::ArchSpec& spec,
                            const TrainState<T>& state) {
  auto f = io::detail::open_out(path);
  f.write("MFT1", 4);
  io::detail::write_raw<std::uint32_t>(f, io::kCheckpointVersion);
  io::write_arch(f, spec);
  io::write_tensor_map(f, state.params);
  io::write_tensor_map(f, state.adam.m);
  io::write_tensor_map(f, state.adam.v);
  io::detail::write_raw<std::uint64_t>(f, state.adam.t);
  io::detail::write_raw<std::uint64_t>(f, state.iteration);
  io::detail::write_raw<std::uint64_t>(f, state.seed);
  if (!f) throw DataError("write failed: " + path.string());
}

template <typename T>
std::pair<nn::ArchSpec, TrainState<T>> read_train_checkpoint(const std::filesystem::path& path) {
  auto f = io::detail::open_in(path);
  io::detail::expect_magic(f, "MFT1", path.string());
  auto version = io::detail::read_raw<std::uint32_t>(f, path.string());
  if (version != io::kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  nn::ArchSpec spec = io::read_arch(f, path.string());
  TrainState<T> state;
  state.params = io::read_tensor_map<T>(f, path.string(), /*as_leaves=*/true);
  state.adam.m = io::read_tensor_map<T>(f, path.string(), false);
  state.adam.v = io::read_tensor_map<T>(f, path.string(), false);
  state.adam.t = io::detail::read_raw<std::uint64_t>(f, path.string());
  state.iteration = io::detail::read_raw<std::uint64_t>(f, path.string());
  state.seed = io::detail::read_raw<std::uint64_t>(f, path.string());
  return {spec, state};
}

// Model parameters from either a trainer or a model checkpoint.
template <typename T>
std::pair<nn::ArchSpec, ParamSet<T>> read_any_checkpoint(const std::filesystem::path& path) {
  {
    auto f = io::detail::open_in(path);
    char magic[4];
    f.read(magic, 4);
    if (f && std::string(magic, 4) == "MFT1") {
      auto [spec, state] = read_train_checkpoint<T>(path);
      return {spec, std::move(state.params)};
    }
  }
  return io::read_checkpoint<T>(path);
}

namespace detail {

inline std::size_t thread_cap() {
  const char* env = std::getenv("METAFIT_THREADS");
  if (!env) return 1;
  long v = std::atol(env);
  return v > 1 ? static_cast<std::size_t>(v) : 1;
}

// Augment every image sample in an episode; non-image payloads pass
// through untouched.
template <typename T>
void augment_episode(episodes::Episode<T>& ep, const episodes::AugmentPolicy& policy, Rng& rng) {
  if (!policy.enabled) return;
  for (auto* set : {&ep.support, &ep.query})
    for (auto& s : *set)
      if (s.payload.shape().size() == 3) s.payload = episodes::augment(s.payload, policy, rng);
}

}  // namespace detail

// Run the loop from state.iteration up to schedule.total_iterations.
template <typename T>
TrainState<T> train_loop(TrainState<T> state, const nn::ArchSpec& spec,
                         const episodes::Dataset<T>& dataset, const meta::MetaConfig& cfg,
                         const TrainSchedule& sched,
                         const episodes::AugmentPolicy& aug = {},
                         const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  sched.validate();
  if (dataset.role != episodes::Role::meta_train)
    throw DataError("train: dataset role must be meta-train");
  episodes::validate_protocol(dataset, cfg.k, cfg.q);
  Rng master(state.seed);

  auto checkpoint = [&](const std::string& name) {
    if (hooks.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(hooks.checkpoint_dir);
    write_train_checkpoint(hooks.checkpoint_dir / name, spec, state);
  };

  for (std::uint64_t it = state.iteration; it < sched.total_iterations; ++it) {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng = master.split(it);

    std::vector<episodes::Episode<T>> batch;
    batch.reserve(cfg.tasks_per_batch);
    for (std::size_t t = 0; t < cfg.tasks_per_batch; ++t) {
      episodes::Episode<T> ep = episodes::sample_episode(dataset, cfg.k, cfg.q, rng);
      detail::augment_episode(ep, aug, rng);
      batch.push_back(std::move(ep));
    }

    auto run_task = [&](const episodes::Episode<T>& ep) {
      Tensor<T> sx = episodes::stack_samples(ep.support);
      Tensor<T> sy = episodes::label_tensor<T>(ep.support_labels);
      Tensor<T> qx = episodes::stack_samples(ep.query);
      Tensor<T> qy = episodes::label_tensor<T>(ep.query_labels);
      ParamSet<T> adapted =
          meta::inner_adapt(spec, state.params, sx, sy, static_cast<T>(cfg.gamma),
                            cfg.inner_steps, cfg.second_order, cfg.task_loss_reduction);
      return meta::query_loss(spec, adapted, qx, qy, cfg.task_loss_reduction);
    };

    std::vector<Tensor<T>> task_losses(batch.size());
    std::size_t cap = detail::thread_cap();
    if (cap > 1 && batch.size() > 1) {
      std::vector<std::future<Tensor<T>>> futures;
      futures.reserve(batch.size());
      for (const auto& ep : batch)
        futures.push_back(std::async(std::launch::async, run_task, std::cref(ep)));
      for (std::size_t t = 0; t < batch.size(); ++t) task_losses[t] = futures[t].get();
    } else {
      for (std::size_t t = 0; t < batch.size(); ++t) task_losses[t] = run_task(batch[t]);
    }

    Tensor<T> meta_loss;
    if (it >= sched.da_activation_iteration) {
      meta_loss = meta::da_meta_loss(task_losses, static_cast<T>(cfg.eta),
                                     static_cast<T>(cfg.epsilon));
    } else {
      meta_loss = task_losses[0];
      for (std::size_t t = 1; t < task_losses.size(); ++t)
        meta_loss = add(meta_loss, task_losses[t]);
    }

    if (!std::isfinite(static_cast<double>(meta_loss.item()))) {
      if (hooks.log) {
        nlohmann::json diag{{"iteration", it}, {"error", "non-finite meta loss"}};
        *hooks.log << diag.dump() << '\n' << std::flush;
      }
      throw NumericError("train: non-finite meta loss at iteration " + std::to_string(it));
    }

    ParamSet<T> grads = grad(meta_loss, state.params);
    double alpha = lr_at(it, sched, cfg.alpha);
    state.params = meta::meta_update_adam(state.params, grads, static_cast<T>(alpha), state.adam);
    state.iteration = it + 1;

    TrainLogRecord rec;
    rec.iteration = it;
    for (const auto& l : task_losses) rec.task_losses.push_back(static_cast<double>(l.item()));
    rec.meta_loss = static_cast<double>(meta_loss.item());
    rec.alpha = alpha;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    if (hooks.log) *hooks.log << to_json(rec).dump() << '\n' << std::flush;
    if (hooks.on_record) hooks.on_record(rec);

    if (sched.checkpoint_every > 0 && state.iteration % sched.checkpoint_every == 0 &&
        state.iteration < sched.total_iterations) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06llu.bin",
                    static_cast<unsigned long long>(state.iteration));
      checkpoint(name);
    }
  }

  checkpoint("final.bin");
  return state;
}

// Fresh training run from a seeded initialization.
template <typename T>
TrainState<T> train(const nn::ArchSpec& spec, const episodes::Dataset<T>& dataset,
                    const meta::MetaConfig& cfg, const TrainSchedule& sched,
                    const episodes::AugmentPolicy& aug = {}, const TrainHooks<T>& hooks = {}) {
  TrainState<T> state;
  state.params = nn::init_params<T>(spec, sched.seed);
  state.adam = meta::AdamState<T>::zeros_like(state.params);
  state.iteration = 0;
  state.seed = sched.seed;
  return train_loop(std::move(state), spec, dataset, cfg, sched, aug, hooks);
}

}  // namespace metafit::train
