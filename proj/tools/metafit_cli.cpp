// metafit command line: synth | train | eval | ablate | gradcheck.
//
// Configuration precedence: built-in defaults < --config file < flags.
// Every command echoes its resolved configuration to
// <out_dir>/config_echo before doing any work, so a run can be
// reproduced from its own output directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "metafit/config.hpp"
#include "metafit/episodes.hpp"
#include "metafit/errors.hpp"
#include "metafit/eval.hpp"
#include "metafit/gradcheck_suite.hpp"
#include "metafit/io.hpp"
#include "metafit/metaloss.hpp"
#include "metafit/nn.hpp"
#include "metafit/trainer.hpp"

namespace fs = std::filesystem;
using namespace metafit;

namespace {

struct Invocation {
  std::string command;
  cli::RunConfig cfg;
};

meta::MetaConfig meta_config(const cli::RunConfig& cfg) {
  meta::MetaConfig m;
  m.eta = cfg.eta;
  m.epsilon = cfg.epsilon;
  m.gamma = cfg.gamma;
  m.alpha = cfg.alpha;
  m.inner_steps = cfg.inner_steps;
  m.k = cfg.k;
  m.q = cfg.q;
  m.tasks_per_batch = cfg.tasks_per_batch;
  m.second_order = cfg.second_order;
  m.task_loss_reduction = meta::reduction_from_name(cfg.loss_reduction);
  m.validate();
  return m;
}

train::TrainSchedule schedule(const cli::RunConfig& cfg) {
  train::TrainSchedule s;
  s.total_iterations = cfg.total_iterations;
  if (cfg.method == "maml") {
    s.da_activation_iteration = cfg.total_iterations;  // plain sum throughout
  } else if (cfg.da_activation_iteration < 0) {
    s.da_activation_iteration = cfg.total_iterations / 2;
  } else {
    s.da_activation_iteration = static_cast<std::uint64_t>(cfg.da_activation_iteration);
  }
  s.lr_decay_iterations = cfg.lr_decay_iterations;
  s.lr_decay_factor = cfg.lr_decay_factor;
  s.checkpoint_every = cfg.checkpoint_every;
  s.seed = cfg.seed;
  s.validate();
  return s;
}

episodes::AugmentPolicy augment_policy(const cli::RunConfig& cfg) {
  episodes::AugmentPolicy p;
  p.enabled = cfg.aug;
  p.rot_degrees = cfg.rot_degrees;
  p.hflip_prob = cfg.hflip_prob;
  p.vflip_prob = cfg.vflip_prob;
  p.scale_min = cfg.scale_min;
  p.scale_max = cfg.scale_max;
  p.validate();
  return p;
}

template <typename T>
std::pair<episodes::Dataset<T>, episodes::Dataset<T>> load_pools(const cli::RunConfig& cfg) {
  if (cfg.data_dir.empty()) {
    return episodes::synth_pools<T>(cfg.seed, cfg.n_train_classes, cfg.n_test_classes,
                                    cfg.samples_per_class, cfg.dim);
  }
  std::optional<Shape> image_shape;
  if (cfg.arch == "conv4") image_shape = Shape{cfg.channels, cfg.image_size, cfg.image_size};
  auto train_ds = episodes::load_directory<T>(fs::path(cfg.data_dir) / "train",
                                              episodes::Role::meta_train, image_shape);
  auto test_ds = episodes::load_directory<T>(fs::path(cfg.data_dir) / "test",
                                             episodes::Role::meta_test, image_shape);
  episodes::validate_disjoint(train_ds, test_ds);
  return {std::move(train_ds), std::move(test_ds)};
}

// Architecture as configured, with the MLP input dimension taken from
// the data itself.
template <typename T>
nn::ArchSpec arch_from(const cli::RunConfig& cfg, const episodes::Dataset<T>& ds) {
  if (cfg.arch == "conv4")
    return nn::conv4_spec(cfg.channels, cfg.image_size, cfg.image_size, cfg.conv_width);
  if (cfg.arch != "mlp") throw ConfigError("unknown arch '" + cfg.arch + "'");
  const Tensor<T>& sample = ds.classes.at(0).samples.at(0).payload;
  std::vector<std::size_t> hidden(cfg.hidden_widths.begin(), cfg.hidden_widths.end());
  return nn::mlp_spec(shape_numel(sample.shape()), std::move(hidden));
}

void echo_config(const cli::RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  cli::write_config_echo(cfg, fs::path(cfg.out_dir) / "config_echo");
}

// ---- synth ----

template <typename T>
int cmd_synth(const cli::RunConfig& cfg) {
  echo_config(cfg);
  auto [train_ds, test_ds] = episodes::synth_pools<T>(
      cfg.seed, cfg.n_train_classes, cfg.n_test_classes, cfg.samples_per_class, cfg.dim);
  episodes::export_npt_tree(train_ds, fs::path(cfg.out_dir) / "train");
  episodes::export_npt_tree(test_ds, fs::path(cfg.out_dir) / "test");

  nlohmann::json manifest{{"seed", cfg.seed},
                          {"dim", cfg.dim},
                          {"samples_per_class", cfg.samples_per_class}};
  for (const char* part : {"train", "test"}) {
    const auto& ds = std::string(part) == "train" ? train_ds : test_ds;
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& c : ds.classes) classes[c.id] = c.samples.size();
    manifest[part] = classes;
  }
  std::ofstream mf(fs::path(cfg.out_dir) / "manifest.json");
  if (!mf) throw DataError("cannot write manifest in " + cfg.out_dir);
  mf << manifest.dump(2) << '\n';
  std::cout << "synth: " << cfg.n_train_classes << " train / " << cfg.n_test_classes
            << " test classes -> " << cfg.out_dir << '\n';
  return 0;
}

// ---- train ----

template <typename T>
int cmd_train(const cli::RunConfig& cfg) {
  if (cfg.method != "daml" && cfg.method != "maml")
    throw ConfigError("train: method must be daml or maml, got '" + cfg.method + "'");
  echo_config(cfg);
  auto [train_ds, test_ds] = load_pools<T>(cfg);
  (void)test_ds;

  meta::MetaConfig mc = meta_config(cfg);
  train::TrainSchedule sched = schedule(cfg);
  episodes::AugmentPolicy aug = augment_policy(cfg);

  bool resuming = !cfg.resume.empty();
  std::ofstream log(fs::path(cfg.out_dir) / "logs.jsonl",
                    resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot open logs.jsonl in " + cfg.out_dir);
  train::TrainHooks<T> hooks;
  hooks.log = &log;
  hooks.checkpoint_dir = fs::path(cfg.out_dir) / "checkpoints";

  train::TrainState<T> final_state;
  nn::ArchSpec spec;
  if (resuming) {
    auto [ckpt_spec, state] = train::read_train_checkpoint<T>(cfg.resume);
    spec = ckpt_spec;
    final_state = train::train_loop(std::move(state), spec, train_ds, mc, sched, aug, hooks);
  } else if (!cfg.checkpoint.empty()) {
    auto [ckpt_spec, params] = train::read_any_checkpoint<T>(cfg.checkpoint);
    spec = ckpt_spec;
    train::TrainState<T> state;
    state.params = std::move(params);
    state.adam = meta::AdamState<T>::zeros_like(state.params);
    state.seed = cfg.seed;
    final_state = train::train_loop(std::move(state), spec, train_ds, mc, sched, aug, hooks);
  } else {
    spec = arch_from(cfg, train_ds);
    final_state = train::train(spec, train_ds, mc, sched, aug, hooks);
  }
  std::cout << "train: " << cfg.method << " finished at iteration " << final_state.iteration
            << ", checkpoints in " << (fs::path(cfg.out_dir) / "checkpoints").string() << '\n';
  return 0;
}

// ---- eval ----

template <typename T>
void write_reports(const eval::EvalReport& report, const cli::RunConfig& cfg,
                   nlohmann::json extra = {}) {
  fs::path dir = fs::path(cfg.out_dir) / "reports";
  fs::create_directories(dir);
  std::string stem = report.method + "_k" + std::to_string(report.k);
  nlohmann::json j = eval::to_json(report);
  for (auto& [key, value] : extra.items()) j[key] = value;
  std::ofstream f(dir / (stem + ".json"));
  if (!f) throw DataError("cannot write report in " + dir.string());
  f << j.dump(2) << '\n';
  eval::write_report_csv(report, dir / (stem + ".csv"));
  std::cout << report.method << " k=" << report.k << ": mean auc " << report.mean << " +- "
            << report.stddev << " over " << report.runs << " runs\n";
}

template <typename T>
int cmd_eval(const cli::RunConfig& cfg) {
  echo_config(cfg);
  auto [train_ds, test_ds] = load_pools<T>(cfg);
  (void)train_ds;

  nn::ArchSpec spec;
  ParamSet<T> params;
  if (!cfg.checkpoint.empty()) {
    std::tie(spec, params) = train::read_any_checkpoint<T>(cfg.checkpoint);
  } else {
    if (cfg.method == "daml" || cfg.method == "maml")
      throw ConfigError("eval: method '" + cfg.method + "' needs --checkpoint");
    spec = arch_from(cfg, test_ds);
    params = nn::init_params<T>(spec, cfg.seed);
  }

  std::vector<std::uint64_t> ks =
      cfg.k_sweep.empty() ? std::vector<std::uint64_t>{cfg.k} : cfg.k_sweep;
  for (std::uint64_t k : ks) {
    cli::RunConfig run = cfg;
    run.k = k;
    meta::MetaConfig mc = meta_config(run);
    if (cfg.method == "daml" || cfg.method == "maml") {
      write_reports<T>(eval::meta_test(spec, params, test_ds, mc, cfg.runs, cfg.seed, cfg.method),
                       cfg);
    } else if (cfg.method == "finetune") {
      auto result = eval::finetune_baseline(spec, params, test_ds, mc, cfg.ft_steps, cfg.runs,
                                            cfg.seed, augment_policy(cfg));
      write_reports<T>(result.report, cfg,
                       {{"final_support_losses", result.final_support_losses}});
    } else if (cfg.method == "knn") {
      std::size_t n = cfg.n_neighbors ? cfg.n_neighbors : eval::default_n_neighbors(k);
      write_reports<T>(
          eval::knn_feature_baseline(spec, params, test_ds, k, cfg.q, n, cfg.runs, cfg.seed), cfg);
    } else {
      throw ConfigError("eval: unknown method '" + cfg.method + "'");
    }
  }
  return 0;
}

// ---- ablate ----

template <typename T>
int cmd_ablate(const cli::RunConfig& cfg) {
  echo_config(cfg);
  fs::path dir = fs::path(cfg.out_dir) / "reports";
  fs::create_directories(dir);
  std::ofstream table(fs::path(cfg.out_dir) / "ablation.csv");
  if (!table) throw DataError("cannot write ablation.csv in " + cfg.out_dir);
  table << "eta,aug,mean_auc,std_auc\n";
  table.precision(17);

  for (double eta : {1.0, 3.0, 5.0, 7.0}) {
    for (bool aug : {false, true}) {
      cli::RunConfig cell = cfg;
      cell.method = "daml";
      cell.eta = eta;
      cell.aug = aug;
      auto [train_ds, test_ds] = load_pools<T>(cell);
      nn::ArchSpec spec = arch_from(cell, train_ds);
      train::TrainState<T> state = train::train(spec, train_ds, meta_config(cell), schedule(cell),
                                                augment_policy(cell));
      eval::EvalReport report = eval::meta_test(spec, state.params, test_ds, meta_config(cell),
                                                cell.runs, cell.seed, "daml");
      std::string stem = "ablate_eta" + std::to_string(static_cast<int>(eta)) +
                         (aug ? "_aug1" : "_aug0");
      eval::write_report_json(report, dir / (stem + ".json"));
      table << eta << ',' << (aug ? 1 : 0) << ',' << report.mean << ',' << report.stddev << '\n';
      std::cout << "ablate eta=" << eta << " aug=" << aug << ": mean auc " << report.mean << '\n';
    }
  }
  std::cout << "ablate: table written to " << (fs::path(cfg.out_dir) / "ablation.csv").string()
            << '\n';
  return 0;
}

// ---- gradcheck ----

int cmd_gradcheck(const cli::RunConfig& cfg) {
  echo_config(cfg);
  const char* corrupt = std::getenv("METAFIT_INJECT_BAD_BACKWARD");
  auto results = check::run_suite(/*primitive_trials=*/20, /*composite_trials=*/5, corrupt);
  bool all_pass = true;
  double worst = 0;
  for (const auto& r : results) {
    std::cout << (r.pass ? "pass" : "FAIL") << "  " << r.name << "  max_rel_err " << r.max_rel_err
              << " (tol " << r.tolerance << ")\n";
    all_pass = all_pass && r.pass;
    worst = std::max(worst, r.max_rel_err);
  }
  std::cout << (all_pass ? "gradcheck: all checks passed" : "gradcheck: FAILED")
            << ", worst relative error " << worst << '\n';
  if (!all_pass) throw NumericError("gradcheck failed");
  return 0;
}

template <typename T>
int dispatch(const Invocation& inv) {
  if (inv.command == "synth") return cmd_synth<T>(inv.cfg);
  if (inv.command == "train") return cmd_train<T>(inv.cfg);
  if (inv.command == "eval") return cmd_eval<T>(inv.cfg);
  if (inv.command == "ablate") return cmd_ablate<T>(inv.cfg);
  if (inv.command == "gradcheck") return cmd_gradcheck(inv.cfg);
  throw UsageError("unknown command '" + inv.command + "'");
}

Invocation parse_args(int argc, char** argv) {
  CLI::App app{"metafit: difficulty-aware meta-learning for few-shot binary classification"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> flag_values(cli::fields().size());
  std::vector<CLI::Option*> flag_opts;

  std::vector<CLI::App*> subs;
  for (const char* name : {"synth", "train", "eval", "ablate", "gradcheck"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value config file");
    std::size_t i = 0;
    for (const auto& field : cli::fields()) {
      flag_opts.push_back(sub->add_option("--" + std::string(field.name), flag_values[i],
                                          field.help));
      ++i;
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);  // prints help text or the parse error
    std::exit(code == 0 ? 0 : 2);
  }
  CLI::App* active = app.get_subcommands().at(0);
  std::size_t base = 0;
  for (std::size_t s = 0; s < subs.size(); ++s, base += cli::fields().size())
    if (subs[s] == active) break;

  Invocation inv;
  inv.command = active->get_name();
  if (!config_path.empty()) cli::load_config_file(inv.cfg, config_path);
  for (std::size_t i = 0; i < cli::fields().size(); ++i)
    if (flag_opts[base + i]->count() > 0)
      cli::set_field(inv.cfg, cli::fields()[i], flag_values[i]);
  return inv;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    Invocation inv = parse_args(argc, argv);
    if (inv.cfg.precision == "float64") return dispatch<double>(inv);
    if (inv.cfg.precision == "float32") return dispatch<float>(inv);
    throw ConfigError("precision must be float64 or float32, got '" + inv.cfg.precision + "'");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
