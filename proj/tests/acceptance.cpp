// Acceptance suite: eight gate checks with pinned tolerances, one
// pass/fail line each. Exit 0 only if every gate passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "metafit/episodes.hpp"
#include "metafit/eval.hpp"
#include "metafit/gradcheck_suite.hpp"
#include "metafit/metaloss.hpp"
#include "metafit/nn.hpp"
#include "metafit/trainer.hpp"

using namespace metafit;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& detail, double secs,
            double limit_secs) {
  bool ok = pass && secs < limit_secs;
  if (!ok) ++failures;
  std::printf("%s  criterion %d: %s  (%.2fs, limit %.0fs)\n", ok ? "PASS" : "FAIL", criterion,
              detail.c_str(), secs, limit_secs);
}

// ---- 1: DA task-loss value oracle ----

void criterion1() {
  auto t0 = Clock::now();
  double worst = 0;
  for (int li = 0; li <= 20; ++li) {
    double L = li * 0.1;
    for (double eta : {0.0, 1.0, 3.0, 5.0, 7.0}) {
      double got = meta::da_task_loss(Tensor<double>::scalar(L, true), eta, 1e-6).item();
      // Independent direct arithmetic, including the clamped branch.
      double expect = std::pow(L, eta) * -std::log(std::max(1e-6, 1.0 - L));
      worst = std::max(worst, std::abs(got - expect));
    }
  }
  report(1, worst < 1e-9,
         "da_task_loss grid oracle, max abs err " + std::to_string(worst) + " < 1e-9",
         seconds_since(t0), 1);
}

// ---- 2: down-weighting property ----

void criterion2() {
  auto t0 = Clock::now();
  Rng rng(20240902);
  std::size_t violations = 0, cases = 0;
  auto da = [](double L, double eta) {
    return meta::da_task_loss(Tensor<double>::scalar(L, true), eta, 1e-6).item();
  };
  for (int trial = 0; trial < 10000; ++trial) {
    double l1 = rng.uniform(1e-6, 1.0 - 1e-9);
    double l2 = rng.uniform(1e-6, 1.0 - 1e-9);
    if (l1 == l2) continue;
    if (l1 > l2) std::swap(l1, l2);
    for (double eta : {1.0, 3.0, 5.0, 7.0}) {
      ++cases;
      if (!(da(l1, eta) / da(l2, eta) < l1 / l2)) ++violations;
    }
  }
  report(2,
         violations == 0,
         "down-weighting holds in " + std::to_string(cases) + "/" + std::to_string(cases) +
             " sampled cases",
         seconds_since(t0), 5);
}

// ---- 3: gradient fidelity ----

void criterion3() {
  auto t0 = Clock::now();
  double worst = 0;
  bool pass = true;
  for (const auto& r : check::run_suite(/*primitive_trials=*/100, /*composite_trials=*/10)) {
    worst = std::max(worst, r.max_rel_err);
    pass = pass && r.max_rel_err < 1e-4;
  }
  report(3, pass, "autodiff suite vs finite differences, max rel err " + std::to_string(worst) +
                      " < 1e-4",
         seconds_since(t0), 60);
}

// ---- 4: episodic protocol invariants ----

void criterion4() {
  auto t0 = Clock::now();
  auto [tr, te] = episodes::synth_pools<double>(0, 8, 3, 40, 8);
  episodes::validate_disjoint(tr, te);
  std::set<std::string> train_ids;
  for (const auto& c : tr.classes) train_ids.insert(c.id);
  std::size_t violations = 0;
  Rng rng(20240903);
  for (int i = 0; i < 10000; ++i) {
    const auto& pool = (i % 2 == 0) ? tr : te;
    auto ep = episodes::sample_episode(pool, 5, 15, rng);
    std::size_t s1 = 0, q1 = 0;
    for (int l : ep.support_labels) s1 += l;
    for (int l : ep.query_labels) q1 += l;
    if (s1 != 5 || ep.support.size() != 10) ++violations;
    if (q1 != 15 || ep.query.size() != 30) ++violations;
    std::set<std::uint64_t> sids, qids;
    for (const auto& s : ep.support) sids.insert(s.source_id);
    for (const auto& s : ep.query) qids.insert(s.source_id);
    if (sids.size() != 10 || qids.size() != 30) ++violations;
    for (auto id : qids)
      if (sids.count(id)) ++violations;
    bool from_train = train_ids.count(ep.class_ids[0]) || train_ids.count(ep.class_ids[1]);
    if (from_train != (i % 2 == 0)) ++violations;
  }
  report(4, violations == 0,
         "10000 episodes, " + std::to_string(violations) + " protocol violations",
         seconds_since(t0), 30);
}

// ---- 5: AUC oracle ----

void criterion5() {
  auto t0 = Clock::now();
  Rng rng(20240904);
  std::size_t mismatches = 0, instances = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t n = 2 + rng.below(19);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (auto& s : scores) s = static_cast<double>(rng.below(7)) / 6.0;  // frequent ties
    bool has0 = false, has1 = false;
    for (auto& l : labels) {
      l = rng.coin(0.5) ? 1 : 0;
      (l ? has1 : has0) = true;
    }
    if (!has0 || !has1) continue;
    ++instances;
    double wins = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (labels[i] == 1 && labels[j] == 0) {
          ++pairs;
          wins += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
        }
    if (eval::auc(scores, labels) != wins / static_cast<double>(pairs)) ++mismatches;
  }
  report(5, mismatches == 0,
         std::to_string(instances) + " random instances, " + std::to_string(mismatches) +
             " exact-match failures vs pair counting",
         seconds_since(t0), 5);
}

// ---- 6: end-to-end synthetic benchmark ----

void criterion6() {
  auto t0 = Clock::now();
  auto [tr, te] = episodes::synth_pools<double>(0, 8, 3, 40, 8);
  auto spec = nn::mlp_spec(8, {32, 32});

  meta::MetaConfig mc;  // library defaults: eta 5, gamma 0.05, 5 inner steps, k 5, q 15
  mc.tasks_per_batch = 4;

  train::TrainSchedule daml_sched;
  daml_sched.total_iterations = 1000;
  daml_sched.da_activation_iteration = 500;
  daml_sched.checkpoint_every = 0;
  daml_sched.seed = 0;
  auto maml_sched = daml_sched;
  maml_sched.da_activation_iteration = 1000;  // plain sum throughout

  auto daml = train::train(spec, tr, mc, daml_sched);
  auto maml = train::train(spec, tr, mc, maml_sched);

  double daml_auc[3], maml_k5;
  std::size_t ks[3] = {1, 3, 5};
  for (int i = 0; i < 3; ++i) {
    auto c = mc;
    c.k = ks[i];
    daml_auc[i] = eval::meta_test(spec, daml.params, te, c, 30, 1, "daml").mean;
  }
  maml_k5 = eval::meta_test(spec, maml.params, te, mc, 30, 1, "maml").mean;
  double knn = eval::knn_feature_baseline(spec, daml.params, te, 5, 15, 5, 30, 1).mean;

  bool a = daml_auc[2] >= 0.90;
  bool b = daml_auc[2] >= maml_k5 - 0.02;
  bool c = daml_auc[2] - knn >= 0.05 && maml_k5 - knn >= 0.05;
  bool d = daml_auc[1] >= daml_auc[0] - 0.02 && daml_auc[2] >= daml_auc[1] - 0.02;

  char buf[256];
  std::snprintf(buf, sizeof buf,
                "daml k1/k3/k5 %.3f/%.3f/%.3f, maml k5 %.3f, knn %.3f; gates a%c b%c c%c d%c",
                daml_auc[0], daml_auc[1], daml_auc[2], maml_k5, knn, a ? '+' : '-',
                b ? '+' : '-', c ? '+' : '-', d ? '+' : '-');
  report(6, a && b && c && d, buf, seconds_since(t0), 600);
}

// ---- 7: overfitting reproduction ----

void criterion7() {
  auto t0 = Clock::now();
  auto [tr, te] = episodes::synth_pools<double>(0, 8, 3, 40, 8);
  auto spec = nn::mlp_spec(8, {32, 32});
  auto init = nn::init_params<double>(spec, 1);

  meta::MetaConfig mc;  // gamma 0.05 drives the fine-tuning Adam
  mc.k = 1;
  auto ft1 = eval::finetune_baseline(spec, init, te, mc, 200, 30, 1);
  mc.k = 5;
  auto ft5 = eval::finetune_baseline(spec, init, te, mc, 200, 30, 1);

  double worst_loss = 0;
  for (double l : ft1.final_support_losses) worst_loss = std::max(worst_loss, l);
  bool fits = worst_loss < 0.01;
  bool gap = ft1.report.mean <= ft5.report.mean - 0.05;

  char buf[256];
  std::snprintf(buf, sizeof buf,
                "k=1 max support loss %.2e < 0.01 %c; auc k1 %.3f vs k5 %.3f (gap >= 0.05 %c)",
                worst_loss, fits ? '+' : '-', ft1.report.mean, ft5.report.mean, gap ? '+' : '-');
  report(7, fits && gap, buf, seconds_since(t0), 180);
}

// ---- 8: determinism and resume ----

void criterion8() {
  namespace fs = std::filesystem;
  auto t0 = Clock::now();
  fs::path root = fs::temp_directory_path() / "metafit_acceptance_c8";
  fs::remove_all(root);

  auto [tr, te] = episodes::synth_pools<double>(0, 8, 3, 40, 8);
  auto spec = nn::mlp_spec(8, {32, 32});
  meta::MetaConfig mc;
  train::TrainSchedule sched;
  sched.total_iterations = 40;
  sched.da_activation_iteration = 20;
  sched.checkpoint_every = 20;
  sched.seed = 0;

  auto read_bytes = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };

  train::TrainHooks<double> h1, h2, h3;
  h1.checkpoint_dir = root / "a";
  h2.checkpoint_dir = root / "b";
  h3.checkpoint_dir = root / "c";
  train::train(spec, tr, mc, sched, {}, h1);
  train::train(spec, tr, mc, sched, {}, h2);
  bool identical = read_bytes(root / "a" / "final.bin") == read_bytes(root / "b" / "final.bin");

  auto [spec2, mid] = train::read_train_checkpoint<double>(root / "a" / "ckpt_000020.bin");
  train::train_loop(std::move(mid), spec2, tr, mc, sched, {}, h3);
  bool resumed = read_bytes(root / "a" / "final.bin") == read_bytes(root / "c" / "final.bin");

  fs::remove_all(root);
  report(8, identical && resumed,
         std::string("repeat-run checkpoints identical ") + (identical ? "+" : "-") +
             "; midpoint resume identical " + (resumed ? "+" : "-"),
         seconds_since(t0), 120);
}

}  // namespace

int main() {
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7();
  criterion8();
  if (failures == 0) {
    std::printf("acceptance: all 8 criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criteria FAILED\n", failures);
  return 1;
}
