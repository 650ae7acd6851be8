#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "metafit/errors.hpp"

// Operator-facing run configuration. One flat struct carries every
// tunable; a field registry maps each member to its flag name and
// config-file section, so flag parsing, `key = value` file loading,
// and the provenance echo all share one source of truth. Precedence:
// defaults < config file < command-line flags.

namespace metafit::cli {

struct RunConfig {
  // method & model
  std::string method = "daml";      // daml | maml | finetune | knn
  std::string arch = "mlp";         // mlp | conv4
  std::string precision = "float64";  // float64 | float32
  std::uint64_t input_dim = 8;        // mlp input dimension (resolved from data when loading)
  std::vector<std::uint64_t> hidden_widths{32, 32};
  std::uint64_t channels = 3;
  std::uint64_t image_size = 84;
  std::uint64_t conv_width = 64;
  // meta objective & adaptation
  double eta = 5.0;
  double epsilon = 1e-6;
  double gamma = 0.05;
  double alpha = 0.001;
  std::uint64_t inner_steps = 5;
  std::uint64_t k = 5;
  std::uint64_t q = 15;
  std::uint64_t tasks_per_batch = 4;
  bool second_order = true;
  std::string loss_reduction = "mean";
  // schedule
  std::uint64_t total_iterations = 3000;
  std::int64_t da_activation_iteration = -1;  // -1: total_iterations / 2
  std::vector<std::uint64_t> lr_decay_iterations{1500, 2500};
  double lr_decay_factor = 0.1;
  std::uint64_t checkpoint_every = 500;
  std::uint64_t seed = 0;
  // augmentation
  bool aug = false;
  double rot_degrees = 30.0;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double scale_min = 0.8;
  double scale_max = 1.2;
  // paths
  std::string data_dir;
  std::string out_dir = "out";
  std::string checkpoint;  // checkpoint to evaluate / start from
  std::string resume;      // trainer checkpoint to resume
  // evaluation
  std::uint64_t runs = 30;
  std::uint64_t ft_steps = 200;
  std::uint64_t n_neighbors = 0;  // 0: min(5, 2k-1) rounded down to odd
  std::vector<std::uint64_t> k_sweep;
  // synthetic pools
  std::uint64_t n_train_classes = 8;
  std::uint64_t n_test_classes = 3;
  std::uint64_t samples_per_class = 40;
  std::uint64_t dim = 8;
};

struct Field {
  const char* section;
  const char* name;
  std::variant<std::string RunConfig::*, bool RunConfig::*, double RunConfig::*,
               std::uint64_t RunConfig::*, std::int64_t RunConfig::*,
               std::vector<std::uint64_t> RunConfig::*>
      member;
  const char* help;
};

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"run", "method", &RunConfig::method, "daml | maml | finetune | knn"},
      {"run", "arch", &RunConfig::arch, "mlp | conv4"},
      {"run", "precision", &RunConfig::precision, "float64 | float32"},
      {"model", "input_dim", &RunConfig::input_dim, "mlp input dimension"},
      {"model", "hidden_widths", &RunConfig::hidden_widths, "mlp hidden widths (comma separated)"},
      {"model", "channels", &RunConfig::channels, "image channels"},
      {"model", "image_size", &RunConfig::image_size, "image height/width"},
      {"model", "conv_width", &RunConfig::conv_width, "conv filters per block"},
      {"meta", "eta", &RunConfig::eta, "difficulty scaling exponent"},
      {"meta", "epsilon", &RunConfig::epsilon, "floor inside the meta-loss log"},
      {"meta", "gamma", &RunConfig::gamma, "inner-loop learning rate"},
      {"meta", "alpha", &RunConfig::alpha, "meta learning rate"},
      {"meta", "inner_steps", &RunConfig::inner_steps, "adaptation steps"},
      {"meta", "k", &RunConfig::k, "support samples per class"},
      {"meta", "q", &RunConfig::q, "query samples per class"},
      {"meta", "tasks_per_batch", &RunConfig::tasks_per_batch, "tasks per meta update"},
      {"meta", "second_order", &RunConfig::second_order, "differentiate through adaptation"},
      {"meta", "loss_reduction", &RunConfig::loss_reduction, "mean | sum over task samples"},
      {"schedule", "total_iterations", &RunConfig::total_iterations, "meta-training iterations"},
      {"schedule", "da_activation_iteration", &RunConfig::da_activation_iteration,
       "first difficulty-aware iteration (-1: total/2)"},
      {"schedule", "lr_decay_iterations", &RunConfig::lr_decay_iterations,
       "decay milestones (comma separated)"},
      {"schedule", "lr_decay_factor", &RunConfig::lr_decay_factor, "multiplier at each milestone"},
      {"schedule", "checkpoint_every", &RunConfig::checkpoint_every, "checkpoint cadence (0: off)"},
      {"schedule", "seed", &RunConfig::seed, "master seed"},
      {"augment", "aug", &RunConfig::aug, "enable image augmentation"},
      {"augment", "rot_degrees", &RunConfig::rot_degrees, "rotation range +- degrees"},
      {"augment", "hflip_prob", &RunConfig::hflip_prob, "horizontal flip probability"},
      {"augment", "vflip_prob", &RunConfig::vflip_prob, "vertical flip probability"},
      {"augment", "scale_min", &RunConfig::scale_min, "scale range lower bound"},
      {"augment", "scale_max", &RunConfig::scale_max, "scale range upper bound"},
      {"paths", "data_dir", &RunConfig::data_dir, "dataset root (train/ and test/ subtrees)"},
      {"paths", "out_dir", &RunConfig::out_dir, "output directory"},
      {"paths", "checkpoint", &RunConfig::checkpoint, "checkpoint to evaluate or start from"},
      {"paths", "resume", &RunConfig::resume, "trainer checkpoint to resume from"},
      {"eval", "runs", &RunConfig::runs, "evaluation runs"},
      {"eval", "ft_steps", &RunConfig::ft_steps, "fine-tuning steps"},
      {"eval", "n_neighbors", &RunConfig::n_neighbors, "knn neighbors (0: auto)"},
      {"eval", "k_sweep", &RunConfig::k_sweep, "evaluate each k (comma separated)"},
      {"synth", "n_train_classes", &RunConfig::n_train_classes, "synthetic meta-train classes"},
      {"synth", "n_test_classes", &RunConfig::n_test_classes, "synthetic meta-test classes"},
      {"synth", "samples_per_class", &RunConfig::samples_per_class, "samples per class"},
      {"synth", "dim", &RunConfig::dim, "synthetic feature dimension"},
  };
  return f;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::uint64_t> parse_u64_list(const std::string& s, const std::string& key) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoull(tok));
    } catch (...) {
      throw ConfigError("config: bad integer '" + tok + "' for " + key);
    }
  }
  return out;
}

}  // namespace detail

inline void set_field(RunConfig& cfg, const Field& field, const std::string& value) {
  const std::string key = field.name;
  try {
    std::visit(
        [&](auto member) {
          using M = std::remove_reference_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<M, std::string>) {
            cfg.*member = value;
          } else if constexpr (std::is_same_v<M, bool>) {
            if (value == "true" || value == "1")
              cfg.*member = true;
            else if (value == "false" || value == "0")
              cfg.*member = false;
            else
              throw ConfigError("config: bad boolean '" + value + "' for " + key);
          } else if constexpr (std::is_same_v<M, double>) {
            cfg.*member = std::stod(value);
          } else if constexpr (std::is_same_v<M, std::uint64_t>) {
            cfg.*member = std::stoull(value);
          } else if constexpr (std::is_same_v<M, std::int64_t>) {
            cfg.*member = std::stoll(value);
          } else {
            cfg.*member = detail::parse_u64_list(value, key);
          }
        },
        field.member);
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    throw ConfigError("config: bad value '" + value + "' for " + key);
  }
}

inline std::string get_field(const RunConfig& cfg, const Field& field) {
  return std::visit(
      [&](auto member) -> std::string {
        using M = std::remove_cv_t<std::remove_reference_t<decltype(cfg.*member)>>;
        if constexpr (std::is_same_v<M, std::string>) {
          return cfg.*member;
        } else if constexpr (std::is_same_v<M, bool>) {
          return (cfg.*member) ? "true" : "false";
        } else if constexpr (std::is_same_v<M, double>) {
          std::ostringstream os;
          os.precision(17);
          os << (cfg.*member);
          return os.str();
        } else if constexpr (std::is_same_v<M, std::vector<std::uint64_t>>) {
          std::ostringstream os;
          const auto& v = cfg.*member;
          for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
          return os.str();
        } else {
          return std::to_string(cfg.*member);
        }
      },
      field.member);
}

inline const Field& find_field(const std::string& name) {
  for (const auto& f : fields())
    if (name == f.name) return f;
  throw ConfigError("config: unknown key '" + name + "'");
}

// `key = value` file with [section] grouping. Sections are cosmetic
// (keys are globally unique) but a key listed under the wrong section
// is rejected.
inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path.string());
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::size_t hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    const Field& field = find_field(key);
    if (!section.empty() && section != field.section)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": key '" + key +
                        "' does not belong to section [" + section + "]");
    set_field(cfg, field, value);
  }
}

inline void write_config_echo(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write config echo: " + path.string());
  std::string section;
  for (const auto& field : fields()) {
    if (section != field.section) {
      section = field.section;
      f << (f.tellp() > 0 ? "\n" : "") << '[' << section << "]\n";
    }
    f << field.name << " = " << get_field(cfg, field) << '\n';
  }
}

}  // namespace metafit::cli
