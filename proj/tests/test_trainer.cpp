#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "metafit/trainer.hpp"

using namespace metafit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

meta::MetaConfig small_meta() {
  meta::MetaConfig cfg;
  cfg.k = 3;
  cfg.q = 5;
  cfg.tasks_per_batch = 2;
  cfg.inner_steps = 2;
  return cfg;
}

train::TrainSchedule small_sched(std::uint64_t total, std::uint64_t da_at,
                                 std::uint64_t seed = 0) {
  train::TrainSchedule s;
  s.total_iterations = total;
  s.da_activation_iteration = da_at;
  s.lr_decay_iterations = {};
  s.checkpoint_every = 0;
  s.seed = seed;
  return s;
}

bool params_identical(const ParamSet<double>& a, const ParamSet<double>& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.tensor(i).size(); ++j)
      if (a.tensor(i)[j] != b.tensor(i)[j]) return false;
  return true;
}

}  // namespace

TEST_CASE("learning rate schedule counts passed milestones") {
  train::TrainSchedule s;
  s.lr_decay_iterations = {1500, 2500};
  s.lr_decay_factor = 0.1;
  CHECK(train::lr_at(0, s, 0.001) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(train::lr_at(1499, s, 0.001) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(train::lr_at(1500, s, 0.001) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(train::lr_at(2499, s, 0.001) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(train::lr_at(2500, s, 0.001) == doctest::Approx(0.00001).epsilon(1e-12));
  s.lr_decay_factor = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("zero-iteration run returns the seeded initialization") {
  auto spec = nn::mlp_spec(4, {8});
  auto [tr, te] = episodes::synth_pools<double>(1, 4, 2, 12, 4);
  auto state = train::train(spec, tr, small_meta(), small_sched(0, 0, 7));
  CHECK(state.iteration == 0);
  CHECK(params_identical(state.params, nn::init_params<double>(spec, 7)));
}

TEST_CASE("one log record per iteration; plain-sum objective before activation") {
  auto spec = nn::mlp_spec(4, {8});
  auto [tr, te] = episodes::synth_pools<double>(1, 4, 2, 12, 4);
  std::vector<train::TrainLogRecord> records;
  train::TrainHooks<double> hooks;
  hooks.on_record = [&](const train::TrainLogRecord& r) { records.push_back(r); };

  // da_activation at 4 of 8: first half plain sum, second half DA loss.
  auto cfg = small_meta();
  train::train(spec, tr, cfg, small_sched(8, 4, 3), {}, hooks);
  REQUIRE(records.size() == 8);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    CHECK(r.iteration == i);
    REQUIRE(r.task_losses.size() == 2);
    double plain = r.task_losses[0] + r.task_losses[1];
    double da = 0;
    for (double l : r.task_losses)
      da += std::pow(l, cfg.eta) * -std::log(std::max(cfg.epsilon, 1.0 - l));
    if (i < 4)
      CHECK(r.meta_loss == doctest::Approx(plain).epsilon(1e-9));
    else
      CHECK(r.meta_loss == doctest::Approx(da).epsilon(1e-9));
  }
}

TEST_CASE("meta-test datasets are rejected by the trainer") {
  auto spec = nn::mlp_spec(4, {8});
  auto [tr, te] = episodes::synth_pools<double>(1, 4, 2, 12, 4);
  CHECK_THROWS_AS(train::train(spec, te, small_meta(), small_sched(2, 1)), DataError);
}

TEST_CASE("training is deterministic in the seed") {
  auto spec = nn::mlp_spec(4, {8});
  auto [tr, te] = episodes::synth_pools<double>(1, 4, 2, 12, 4);
  auto a = train::train(spec, tr, small_meta(), small_sched(6, 3, 5));
  auto b = train::train(spec, tr, small_meta(), small_sched(6, 3, 5));
  auto c = train::train(spec, tr, small_meta(), small_sched(6, 3, 6));
  CHECK(params_identical(a.params, b.params));
  CHECK_FALSE(params_identical(a.params, c.params));
}

TEST_CASE("task-level concurrency does not change the result") {
  auto spec = nn::mlp_spec(4, {8});
  auto [tr, te] = episodes::synth_pools<double>(1, 4, 2, 12, 4);
  auto seq = train::train(spec, tr, small_meta(), small_sched(5, 2, 9));
  setenv("METAFIT_THREADS", "4", 1);
  auto par = train::train(spec, tr, small_meta(), small_sched(5, 2, 9));
  unsetenv("METAFIT_THREADS");
  CHECK(params_identical(seq.params, par.params));
}

TEST_CASE("trainer checkpoint roundtrip preserves optimizer state") {
  TempDir tmp("metafit_trainer_ckpt_test");
  auto spec = nn::mlp_spec(4, {8});
  auto [tr, te] = episodes::synth_pools<double>(1, 4, 2, 12, 4);
  auto state = train::train(spec, tr, small_meta(), small_sched(4, 2, 1));
  train::write_train_checkpoint(tmp.path / "s.bin", spec, state);
  auto [spec2, state2] = train::read_train_checkpoint<double>(tmp.path / "s.bin");
  CHECK(spec2.input_shape == spec.input_shape);
  CHECK(state2.iteration == state.iteration);
  CHECK(state2.seed == state.seed);
  CHECK(state2.adam.t == state.adam.t);
  CHECK(params_identical(state2.params, state.params));
  CHECK(params_identical(state2.adam.m, state.adam.m));
  CHECK(params_identical(state2.adam.v, state.adam.v));
}

TEST_CASE("resume from the midpoint checkpoint matches an uninterrupted run") {
  TempDir tmp("metafit_trainer_resume_test");
  auto spec = nn::mlp_spec(4, {8});
  auto [tr, te] = episodes::synth_pools<double>(1, 4, 2, 12, 4);

  auto sched = small_sched(10, 5, 2);
  sched.checkpoint_every = 5;
  std::vector<train::TrainLogRecord> full_log;
  train::TrainHooks<double> hooks;
  hooks.checkpoint_dir = tmp.path / "a";
  hooks.on_record = [&](const train::TrainLogRecord& r) { full_log.push_back(r); };
  auto full = train::train(spec, tr, small_meta(), sched, {}, hooks);

  auto [spec2, mid] = train::read_train_checkpoint<double>(tmp.path / "a" / "ckpt_000005.bin");
  CHECK(mid.iteration == 5);
  std::vector<train::TrainLogRecord> tail_log;
  train::TrainHooks<double> hooks2;
  hooks2.checkpoint_dir = tmp.path / "b";
  hooks2.on_record = [&](const train::TrainLogRecord& r) { tail_log.push_back(r); };
  auto resumed = train::train_loop(std::move(mid), spec2, tr, small_meta(), sched, {}, hooks2);

  CHECK(params_identical(full.params, resumed.params));
  CHECK(params_identical(full.adam.m, resumed.adam.m));
  CHECK(params_identical(full.adam.v, resumed.adam.v));

  // The resumed log must replay iterations 5..9 exactly (wall time aside).
  REQUIRE(tail_log.size() == 5);
  for (std::size_t i = 0; i < tail_log.size(); ++i) {
    const auto& a = full_log[5 + i];
    const auto& b = tail_log[i];
    CHECK(a.iteration == b.iteration);
    CHECK(a.meta_loss == b.meta_loss);
    CHECK(a.alpha == b.alpha);
    REQUIRE(a.task_losses.size() == b.task_losses.size());
    for (std::size_t t = 0; t < a.task_losses.size(); ++t)
      CHECK(a.task_losses[t] == b.task_losses[t]);
  }

  // And the final checkpoints on disk are bit-identical.
  auto read_bytes = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  CHECK(read_bytes(tmp.path / "a" / "final.bin") == read_bytes(tmp.path / "b" / "final.bin"));
}

TEST_CASE("read_any_checkpoint accepts both trainer and model files") {
  TempDir tmp("metafit_anyckpt_test");
  auto spec = nn::mlp_spec(4, {8});
  auto params = nn::init_params<double>(spec, 11);
  io::write_checkpoint(tmp.path / "model.bin", spec, params);
  train::TrainState<double> state;
  state.params = params.clone_leaves(true);
  state.adam = meta::AdamState<double>::zeros_like(params);
  train::write_train_checkpoint(tmp.path / "train.bin", spec, state);
  auto [s1, p1] = train::read_any_checkpoint<double>(tmp.path / "model.bin");
  auto [s2, p2] = train::read_any_checkpoint<double>(tmp.path / "train.bin");
  CHECK(params_identical(p1, params.clone_leaves(true)));
  CHECK(params_identical(p2, params.clone_leaves(true)));
}
