#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

// Spawns the installed CLI binary and checks its observable contract:
// files on disk and exit codes.

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "metafit_cli_test";

int run(const std::string& args) {
  std::string cmd = std::string(METAFIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file())
      out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
};

std::string p(const std::string& rel) { return (kRoot / rel).string(); }

}  // namespace

TEST_CASE("cli end-to-end contract") {
  Fixture fx;

  // --- synth: deterministic, manifest matches the tree ---
  REQUIRE(run("synth --seed 11 --out_dir " + p("data_a")) == 0);
  REQUIRE(run("synth --seed 11 --out_dir " + p("data_b")) == 0);
  auto a = tree_bytes(kRoot / "data_a");
  auto b = tree_bytes(kRoot / "data_b");
  // The echo records out_dir itself; every data file must match bytewise.
  a.erase("config_echo");
  b.erase("config_echo");
  CHECK(a.size() == b.size());
  CHECK(a == b);

  nlohmann::json manifest = nlohmann::json::parse(slurp(kRoot / "data_a" / "manifest.json"));
  CHECK(manifest["train"].size() == 8);
  CHECK(manifest["test"].size() == 3);
  for (auto& [cls, count] : manifest["train"].items()) {
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(kRoot / "data_a" / "train" / cls))
      files += e.is_regular_file();
    CHECK(files == count.get<std::size_t>());
  }

  // --- train: emits one log line per iteration plus checkpoints ---
  std::string common = " --data_dir " + p("data_a") +
                       " --total_iterations 20 --checkpoint_every 10 --seed 4"
                       " --k 3 --q 5 --inner_steps 2";
  REQUIRE(run("train --out_dir " + p("run1") + common) == 0);
  {
    std::ifstream log(kRoot / "run1" / "logs.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line)) {
      nlohmann::json r = nlohmann::json::parse(line);
      CHECK(r["iteration"] == lines);
      ++lines;
    }
    CHECK(lines == 20);
  }
  CHECK(fs::exists(kRoot / "run1" / "checkpoints" / "ckpt_000010.bin"));
  CHECK(fs::exists(kRoot / "run1" / "checkpoints" / "final.bin"));

  // --- training must not touch the input data directory ---
  auto a_after = tree_bytes(kRoot / "data_a");
  a_after.erase("config_echo");
  CHECK(a_after == a);

  // --- config echo reproduces the run bit-identically (flags win) ---
  REQUIRE(fs::exists(kRoot / "run1" / "config_echo"));
  REQUIRE(run("train --config " + p("run1/config_echo") + " --out_dir " + p("run2")) == 0);
  CHECK(slurp(kRoot / "run1" / "checkpoints" / "final.bin") ==
        slurp(kRoot / "run2" / "checkpoints" / "final.bin"));

  // --- maml mode: logged meta loss is the plain sum at every iteration ---
  REQUIRE(run("train --method maml --out_dir " + p("run_maml") + common) == 0);
  {
    std::ifstream log(kRoot / "run_maml" / "logs.jsonl");
    std::string line;
    while (std::getline(log, line)) {
      nlohmann::json r = nlohmann::json::parse(line);
      double sum = 0;
      for (double l : r["task_losses"]) sum += l;
      CHECK(r["meta_loss"].get<double>() == doctest::Approx(sum).epsilon(1e-9));
    }
  }

  // --- resume continues from a trainer checkpoint ---
  REQUIRE(run("train --out_dir " + p("run3") + common + " --resume " +
              p("run1/checkpoints/ckpt_000010.bin")) == 0);
  CHECK(slurp(kRoot / "run1" / "checkpoints" / "final.bin") ==
        slurp(kRoot / "run3" / "checkpoints" / "final.bin"));

  // --- eval: k sweep emits one json+csv report pair per k ---
  REQUIRE(run("eval --data_dir " + p("data_a") + " --out_dir " + p("ev") +
              " --checkpoint " + p("run1/checkpoints/final.bin") +
              " --k_sweep 1,2,3 --q 5 --runs 5 --seed 2") == 0);
  for (int k : {1, 2, 3}) {
    fs::path j = kRoot / "ev" / "reports" / ("daml_k" + std::to_string(k) + ".json");
    REQUIRE(fs::exists(j));
    nlohmann::json r = nlohmann::json::parse(slurp(j));
    CHECK(r["runs"] == 5);
    CHECK(r["k"] == k);
    CHECK(fs::exists(kRoot / "ev" / "reports" / ("daml_k" + std::to_string(k) + ".csv")));
  }

  // --- baselines run without a checkpoint ---
  CHECK(run("eval --data_dir " + p("data_a") + " --out_dir " + p("ev_knn") +
            " --method knn --k 3 --q 5 --runs 3 --seed 2") == 0);
  CHECK(run("eval --data_dir " + p("data_a") + " --out_dir " + p("ev_ft") +
            " --method finetune --k 3 --q 5 --runs 2 --ft_steps 5 --seed 2") == 0);
}

TEST_CASE("cli exit codes") {
  Fixture fx;
  CHECK(run("--help") == 0);
  CHECK(run("gradcheck --out_dir " + p("gc")) == 0);

  // 2: configuration errors
  CHECK(run("train --no_such_flag 1 --out_dir " + p("x")) == 2);
  CHECK(run("train --method bogus --out_dir " + p("x")) == 2);
  CHECK(run("eval --out_dir " + p("x")) == 2);  // daml eval needs a checkpoint
  {
    std::ofstream bad(kRoot / "bad.ini");
    bad << "no_such_key = 1\n";
  }
  CHECK(run("train --config " + p("bad.ini") + " --out_dir " + p("x")) == 2);
  {
    std::ofstream bad(kRoot / "bad_section.ini");
    bad << "[meta]\nseed = 1\n";  // seed belongs to [schedule]
  }
  CHECK(run("train --config " + p("bad_section.ini") + " --out_dir " + p("x")) == 2);

  // 3: data errors
  CHECK(run("train --data_dir " + p("missing") + " --out_dir " + p("x")) == 3);

  // 4: numeric errors (negative control: corrupted backward)
  std::string cmd = std::string("env METAFIT_INJECT_BAD_BACKWARD=matmul ") + METAFIT_CLI_PATH +
                    " gradcheck --out_dir " + p("gc2") + " >" + p("gc2.log") + " 2>&1";
  int status = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(status) == 4);
  std::string out = slurp(kRoot / "gc2.log");
  CHECK(out.find("FAIL  matmul") != std::string::npos);
}
