#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "metafit/episodes.hpp"
#include "metafit/errors.hpp"
#include "metafit/metaloss.hpp"
#include "metafit/nn.hpp"
#include "metafit/rng.hpp"

// The meta-test protocol (sample an episode, adapt on its support set,
// rank the query set, score with AUC, repeat), plus the two baselines
// it is compared against: supervised fine-tuning on the support set and
// nearest-neighbor voting on frozen penultimate features.

namespace metafit::eval {

// ROC AUC via the rank-sum statistic with midranks for ties:
// P(score+ > score-) + 1/2 P(tie).
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw UsageError("auc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l != 0);
  std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw UsageError("auc: undefined metric, both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] != 0) rank_sum_pos += midrank;
    i = j;
  }
  double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct EvalReport {
  std::vector<double> aucs;
  double mean = 0;
  double stddev = 0;
  std::size_t k = 0, q = 0, runs = 0;
  std::string method;
  std::uint64_t seed = 0;

  void finalize() {
    runs = aucs.size();
    mean = std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(runs);
    double ss = 0;
    for (double a : aucs) ss += (a - mean) * (a - mean);
    stddev = runs > 1 ? std::sqrt(ss / static_cast<double>(runs - 1)) : 0.0;
  }
};

inline nlohmann::json to_json(const EvalReport& r) {
  return nlohmann::json{{"method", r.method}, {"k", r.k},       {"q", r.q},
                        {"runs", r.runs},     {"seed", r.seed}, {"mean_auc", r.mean},
                        {"std_auc", r.stddev}, {"aucs", r.aucs}};
}

inline void write_report_json(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report: " + path.string());
  f << to_json(r).dump(2) << '\n';
}

inline void write_report_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report: " + path.string());
  f << "run,auc\n";
  f.precision(17);
  for (std::size_t i = 0; i < r.aucs.size(); ++i) f << i << ',' << r.aucs[i] << '\n';
}

namespace detail {

template <typename T>
std::vector<double> query_scores(const nn::ArchSpec& spec, const ParamSet<T>& params,
                                 const Tensor<T>& batch) {
  NoGradGuard ng;
  Tensor<T> p = nn::class1_prob(nn::forward(spec, params, batch));
  std::vector<double> scores(p.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = static_cast<double>(p[i]);
  return scores;
}

}  // namespace detail

// Adapt-then-measure: per run, sample one episode from the meta-test
// pool, run inner adaptation on its support set, and score the query
// set with the adapted model's class-1 probability.
template <typename T>
EvalReport meta_test(const nn::ArchSpec& spec, const ParamSet<T>& checkpoint,
                     const episodes::Dataset<T>& dataset, const meta::MetaConfig& cfg,
                     std::size_t runs, std::uint64_t seed, const std::string& method = "daml") {
  if (dataset.role != episodes::Role::meta_test)
    throw DataError("meta_test: dataset role must be meta-test");
  if (runs < 1) throw UsageError("meta_test: runs must be >= 1");
  episodes::validate_protocol(dataset, cfg.k, cfg.q);

  EvalReport report;
  report.method = method;
  report.k = cfg.k;
  report.q = cfg.q;
  report.seed = seed;
  Rng master(seed);
  for (std::size_t run = 0; run < runs; ++run) {
    try {
      Rng rng = master.split(run);
      episodes::Episode<T> ep = episodes::sample_episode(dataset, cfg.k, cfg.q, rng);
      Tensor<T> sx = episodes::stack_samples(ep.support);
      Tensor<T> sy = episodes::label_tensor<T>(ep.support_labels);
      ParamSet<T> adapted =
          meta::inner_adapt(spec, checkpoint, sx, sy, static_cast<T>(cfg.gamma), cfg.inner_steps,
                            /*second_order=*/false, cfg.task_loss_reduction);
      report.aucs.push_back(auc(detail::query_scores(spec, adapted, episodes::stack_samples(ep.query)),
                                ep.query_labels));
    } catch (const Error& e) {
      throw Error("meta_test run " + std::to_string(run) + ": " + e.what(), e.exit_code);
    }
  }
  report.finalize();
  return report;
}

template <typename T>
struct FinetuneResult {
  EvalReport report;
  std::vector<double> final_support_losses;
};

// Supervised training on the support set (Adam, learning rate gamma)
// for ft_steps steps, then AUC on the query set. Image samples are
// augmented each step when the policy is enabled.
template <typename T>
FinetuneResult<T> finetune_baseline(const nn::ArchSpec& spec, const ParamSet<T>& init,
                                    const episodes::Dataset<T>& dataset,
                                    const meta::MetaConfig& cfg, std::size_t ft_steps,
                                    std::size_t runs, std::uint64_t seed,
                                    const episodes::AugmentPolicy& aug = {}) {
  if (dataset.role != episodes::Role::meta_test)
    throw DataError("finetune_baseline: dataset role must be meta-test");
  if (ft_steps < 1) throw UsageError("finetune_baseline: ft_steps must be >= 1");
  episodes::validate_protocol(dataset, cfg.k, cfg.q);

  FinetuneResult<T> result;
  result.report.method = "finetune";
  result.report.k = cfg.k;
  result.report.q = cfg.q;
  result.report.seed = seed;
  Rng master(seed);
  for (std::size_t run = 0; run < runs; ++run) {
    try {
      Rng rng = master.split(run);
      episodes::Episode<T> ep = episodes::sample_episode(dataset, cfg.k, cfg.q, rng);
      Tensor<T> sy = episodes::label_tensor<T>(ep.support_labels);
      ParamSet<T> params = init.clone_leaves(true);
      auto adam = meta::AdamState<T>::zeros_like(params);
      double last_loss = 0;
      for (std::size_t step = 0; step < ft_steps; ++step) {
        std::vector<episodes::Sample<T>> batch = ep.support;
        if (aug.enabled)
          for (auto& s : batch)
            if (s.payload.shape().size() == 3) s.payload = episodes::augment(s.payload, aug, rng);
        Tensor<T> sx = episodes::stack_samples(batch);
        Tensor<T> loss =
            meta::cross_entropy(nn::class1_prob(nn::forward(spec, params, sx)), sy,
                                cfg.task_loss_reduction);
        last_loss = static_cast<double>(loss.item());
        if (!std::isfinite(last_loss))
          throw NumericError("finetune: non-finite loss at step " + std::to_string(step));
        ParamSet<T> grads = grad(loss, params);
        params = meta::meta_update_adam(params, grads, static_cast<T>(cfg.gamma), adam);
      }
      result.final_support_losses.push_back(last_loss);
      result.report.aucs.push_back(
          auc(detail::query_scores(spec, params, episodes::stack_samples(ep.query)),
              ep.query_labels));
    } catch (const Error& e) {
      throw Error("finetune run " + std::to_string(run) + ": " + e.what(), e.exit_code);
    }
  }
  result.report.finalize();
  return result;
}

inline std::size_t default_n_neighbors(std::size_t k) {
  std::size_t n = std::min<std::size_t>(5, 2 * k - 1);
  if (n % 2 == 0) --n;
  return std::max<std::size_t>(1, n);
}

// Frozen-feature nearest neighbors: embed support and query with the
// encoder's penultimate activations and score each query point by the
// label-1 fraction among its n nearest support embeddings (Euclidean).
template <typename T>
EvalReport knn_feature_baseline(const nn::ArchSpec& spec, const ParamSet<T>& encoder,
                                const episodes::Dataset<T>& dataset, std::size_t k, std::size_t q,
                                std::size_t n_neighbors, std::size_t runs, std::uint64_t seed) {
  if (dataset.role != episodes::Role::meta_test)
    throw DataError("knn_feature_baseline: dataset role must be meta-test");
  if (n_neighbors % 2 == 0 || n_neighbors > 2 * k)
    throw UsageError("knn_feature_baseline: n_neighbors must be odd and <= 2k");
  episodes::validate_protocol(dataset, k, q);

  EvalReport report;
  report.method = "knn";
  report.k = k;
  report.q = q;
  report.seed = seed;
  Rng master(seed);
  for (std::size_t run = 0; run < runs; ++run) {
    try {
      Rng rng = master.split(run);
      episodes::Episode<T> ep = episodes::sample_episode(dataset, k, q, rng);
      NoGradGuard ng;
      Tensor<T> se = nn::features(spec, encoder, episodes::stack_samples(ep.support));
      Tensor<T> qe = nn::features(spec, encoder, episodes::stack_samples(ep.query));
      std::size_t dim = se.shape()[1];
      std::vector<double> scores(ep.query.size());
      for (std::size_t i = 0; i < ep.query.size(); ++i) {
        std::vector<std::pair<double, std::size_t>> dists(ep.support.size());
        for (std::size_t s = 0; s < ep.support.size(); ++s) {
          double d2 = 0;
          for (std::size_t d = 0; d < dim; ++d) {
            double diff = static_cast<double>(qe[i * dim + d]) - static_cast<double>(se[s * dim + d]);
            d2 += diff * diff;
          }
          dists[s] = {d2, s};
        }
        std::sort(dists.begin(), dists.end());
        std::size_t votes = 0;
        for (std::size_t s = 0; s < n_neighbors; ++s)
          votes += static_cast<std::size_t>(ep.support_labels[dists[s].second] != 0);
        scores[i] = static_cast<double>(votes) / static_cast<double>(n_neighbors);
      }
      report.aucs.push_back(auc(scores, ep.query_labels));
    } catch (const Error& e) {
      throw Error("knn run " + std::to_string(run) + ": " + e.what(), e.exit_code);
    }
  }
  report.finalize();
  return report;
}

}  // namespace metafit::eval
