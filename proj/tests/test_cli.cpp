// SPDX-License-Identifier: Apache-2.0
// Black-box tests of the sfmc executable.
#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = SFMC_CLI_PATH;

int sfmc(const std::string& args) {
  const int status = std::system((kCli + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::set<std::string> listing(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) out.insert(fs::relative(e.path(), root).string());
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("sfmc_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root / "cfg");
    std::ofstream(root / "cfg" / "scene.json")
        << R"({"seed":3,"image":{"width":48,"height":32},"intrinsics":{"fx":32,"fy":32},"trajectory":{"frames":8}})";
    std::ofstream(root / "cfg" / "train.json") << R"({"seed":5,"learning_rate":0.001,
        "stage1":{"epochs":1,"batch":4},"stage2":{"epochs":2,"batch":4},
        "pose_prior":{"type":"constant_velocity","velocity":[-0.5,0,-0.25]},
        "depthnet":{"depth_bins":16,"z_min":1,"z_max":20}})";
    ASSERT_EQ(sfmc("synth --config " + q(root / "cfg" / "scene.json") + " --out " + q(root / "work" / "data") +
                   " --train 16 --test 8"),
              0);
    ASSERT_EQ(sfmc("train --config " + q(root / "cfg" / "train.json") + " --dataset " + q(root / "work" / "data") +
                   " --out " + q(root / "work" / "run")),
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static fs::path data() { return root / "work" / "data"; }
  static fs::path run() { return root / "work" / "run"; }
  static fs::path cfg(const char* name) { return root / "cfg" / name; }
};

fs::path Cli::root;

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(sfmc(""), 2);
  EXPECT_EQ(sfmc("synth --out " + q(root / "x")), 2);
  EXPECT_EQ(sfmc("synth --config " + q(root / "missing.json") + " --out " + q(root / "x")), 2);
  std::ofstream(root / "cfg" / "bad.json") << R"({"seed":1,"no_such_key":2})";
  EXPECT_EQ(sfmc("synth --config " + q(cfg("bad.json")) + " --out " + q(root / "x")), 2);
  std::ofstream(root / "cfg" / "broken.json") << "{";
  EXPECT_EQ(sfmc("train --config " + q(cfg("broken.json")) + " --dataset " + q(data()) + " --out " + q(root / "x")),
            2);
  EXPECT_EQ(sfmc("train --config " + q(cfg("train.json")) + " --dataset " + q(root / "nowhere") + " --out " +
                 q(root / "x")),
            2);
  EXPECT_EQ(sfmc("train --config " + q(cfg("train.json")) + " --dataset " + q(data()) + " --out " + q(root / "x") +
                 " --stage 3"),
            2);
  EXPECT_EQ(sfmc("train --config " + q(cfg("train.json")) + " --dataset " + q(data()) + " --out " + q(root / "x") +
                 " --stage 2"),
            2);
  EXPECT_EQ(sfmc("eval --predictions " + q(root / "nowhere") + " --dataset " + q(data()) + " --out " +
                 q(root / "x") + " --keep 1.5"),
            2);
  EXPECT_FALSE(fs::exists(root / "x") && !fs::is_empty(root / "x"));
}

TEST_F(Cli, SynthRerunIsByteIdenticalAndRefusesOverwrite) {
  const fs::path again = root / "again";
  ASSERT_EQ(sfmc("synth --config " + q(cfg("scene.json")) + " --out " + q(again) + " --train 16 --test 8"), 0);
  const auto files = listing(data());
  ASSERT_EQ(files, listing(again));
  for (const auto& f : files)
    if (fs::is_regular_file(data() / f)) EXPECT_EQ(slurp(data() / f), slurp(again / f)) << f;
  EXPECT_EQ(sfmc("synth --config " + q(cfg("scene.json")) + " --out " + q(again) + " --train 16 --test 8"), 2);
  EXPECT_EQ(sfmc("synth --config " + q(cfg("scene.json")) + " --out " + q(again) + " --train 16 --test 8 --force"),
            0);
  fs::remove_all(again);
}

TEST_F(Cli, TrainWritesMonotoneLogAndCheckpoints) {
  std::ifstream log(run() / "training_log.csv");
  std::string header, line;
  std::getline(log, header);
  EXPECT_EQ(header.rfind("step,stage,epoch,", 0), 0u);
  long previous = -1;
  std::set<std::string> stages;
  std::size_t rows = 0;
  while (std::getline(log, line)) {
    std::stringstream s(line);
    std::string step, stage;
    std::getline(s, step, ',');
    std::getline(s, stage, ',');
    EXPECT_GT(std::stol(step), previous);
    previous = std::stol(step);
    stages.insert(stage);
    ++rows;
  }
  EXPECT_GT(rows, 0u);
  EXPECT_EQ(stages, (std::set<std::string>{"1", "2"}));
  EXPECT_TRUE(fs::is_regular_file(run() / "latest.ckpt"));
  const auto resolved = nlohmann::json::parse(slurp(run() / "config_resolved.json"));
  EXPECT_EQ(resolved.at("command"), "train");
  EXPECT_EQ(resolved.at("train").at("seed"), 5);
  EXPECT_EQ(sfmc("train --config " + q(cfg("train.json")) + " --dataset " + q(data()) + " --out " + q(run())), 2);
}

TEST_F(Cli, StagedTrainingWithResumeMatchesOneRun) {
  const fs::path staged = root / "staged";
  ASSERT_EQ(sfmc("train --config " + q(cfg("train.json")) + " --dataset " + q(data()) + " --out " + q(staged) +
                 " --stage 1"),
            0);
  ASSERT_EQ(sfmc("train --config " + q(cfg("train.json")) + " --dataset " + q(data()) + " --out " + q(staged) +
                 " --stage 2 --resume " + q(staged / "latest.ckpt")),
            0);
  EXPECT_EQ(slurp(staged / "latest.ckpt"), slurp(run() / "latest.ckpt"));
  EXPECT_EQ(slurp(staged / "training_log.csv"), slurp(run() / "training_log.csv"));
  fs::remove_all(staged);
}

TEST_F(Cli, InferAndEvalStayInsideOut) {
  const auto before = listing(root / "work");
  const fs::path pred = root / "work" / "pred", report = root / "work" / "eval";
  ASSERT_EQ(sfmc("infer --checkpoint " + q(run() / "latest.ckpt") + " --dataset " + q(data()) + " --out " + q(pred)),
            0);
  ASSERT_EQ(sfmc("eval --predictions " + q(pred) + " --dataset " + q(data()) + " --out " + q(report) +
                 " --keep 0.8 --split-dynamic"),
            0);
  for (const auto& p : listing(root / "work"))
    if (!before.count(p)) {
      const bool inside = p.rfind("pred", 0) == 0 || p.rfind("eval", 0) == 0;
      EXPECT_TRUE(inside) << p;
    }

  const auto manifest = nlohmann::json::parse(slurp(data() / "manifest.json"));
  std::size_t windows = 0;
  for (const auto& w : manifest.at("windows")) {
    if (w.at("split") != "test") continue;
    ++windows;
    const std::string key = w.at("frames").at(w.at("key").get<std::size_t>());
    for (const char* f : {"depth.pfm", "uncertainty.pfm", "uncertainty_rank.pfm", "entropy.pfm", "poses.csv"})
      EXPECT_TRUE(fs::is_regular_file(pred / key / f)) << key << "/" << f;
  }
  EXPECT_GT(windows, 0u);

  const std::string metrics = slurp(report / "metrics.csv");
  for (const char* row : {"mean,all,", "mean,static,", "mean,filtered@0.8,"})
    EXPECT_NE(metrics.find(row), std::string::npos) << row;
  EXPECT_TRUE(fs::is_regular_file(report / "sparsification.csv"));

  // A second evaluation is byte-identical.
  const fs::path again = root / "work" / "eval2";
  ASSERT_EQ(sfmc("eval --predictions " + q(pred) + " --dataset " + q(data()) + " --out " + q(again) +
                 " --keep 0.8 --split-dynamic"),
            0);
  EXPECT_EQ(slurp(report / "metrics.csv"), slurp(again / "metrics.csv"));
  EXPECT_EQ(slurp(report / "sparsification.csv"), slurp(again / "sparsification.csv"));
}
