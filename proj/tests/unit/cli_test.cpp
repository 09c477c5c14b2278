// Drives the command-line tool as a subprocess and checks exit codes and
// run-directory contents.

#include <sattca/phantom.hpp>
#include <sattca/segnet.hpp>
#include <sattca/volume_io.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef SATTCA_CLI_PATH
#error "SATTCA_CLI_PATH must point at the built command-line tool"
#endif

namespace fs = std::filesystem;
using namespace sattca;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SATTCA_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "sattca_cli";
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(root_ / "tiny.json") << R"({"network": {"base_channels": 2}, "adapt": {"epochs": 1}})";
  }
  static fs::path root_;
};
fs::path Cli::root_;

}  // namespace

TEST_F(Cli, SynthSplitsAndIsReproducible) {
  ASSERT_EQ(run("synth --cases 10 --seed 7 --out " + (root_ / "ds1").string(), root_ / "s1.log"), 0)
      << slurp(root_ / "s1.log");
  ASSERT_EQ(run("synth --cases 10 --seed 7 --out " + (root_ / "ds2").string(), root_ / "s2.log"), 0);
  const auto m = read_manifest(root_ / "ds1");
  EXPECT_EQ(m.split(Split::kTrain).size(), 7u);
  EXPECT_EQ(m.split(Split::kVal).size(), 1u);
  EXPECT_EQ(m.split(Split::kTest).size(), 2u);
  for (const auto& c : m.cases)
    EXPECT_EQ(read_file_bytes(root_ / "ds1" / c.volume_path),
              read_file_bytes(root_ / "ds2" / c.volume_path));
  EXPECT_EQ(slurp(root_ / "ds1" / "manifest.json"), slurp(root_ / "ds2" / "manifest.json"));
  EXPECT_TRUE(fs::exists(root_ / "ds1" / "config.resolved"));
}

TEST_F(Cli, ConfigErrorsExitWithTwo) {
  EXPECT_EQ(run("synth --cases 10 --bogus --out " + (root_ / "x").string(), root_ / "e1.log"), 2);
  EXPECT_EQ(run("frobnicate", root_ / "e2.log"), 2);
  std::ofstream(root_ / "bad.json") << R"({"adapt": {"epoch": 3}})";
  EXPECT_EQ(run("synth --config " + (root_ / "bad.json").string() + " --out " + (root_ / "x").string(),
                root_ / "e3.log"),
            2);
  EXPECT_NE(slurp(root_ / "e3.log").find("adapt.epoch"), std::string::npos);
}

TEST_F(Cli, TrainAdaptEvalReport) {
  const auto ds = root_ / "ds3";
  const std::string cfg = " --config " + (root_ / "tiny.json").string();
  ASSERT_EQ(run("synth --cases 10 --seed 3 --out " + ds.string(), root_ / "t0.log"), 0);
  ASSERT_EQ(run("train --data " + ds.string() + cfg + " --epochs 1 --batch 4 --out " +
                    (root_ / "train").string(),
                root_ / "t1.log"),
            0)
      << slurp(root_ / "t1.log");
  const auto ckpt = (root_ / "train" / "checkpoint").string();
  EXPECT_NO_THROW(load_checkpoint(ckpt));
  EXPECT_TRUE(fs::exists(root_ / "train" / "config.resolved"));

  ASSERT_EQ(run("predict --data " + ds.string() + cfg + " --checkpoint " + ckpt + " --out " +
                    (root_ / "pred").string(),
                root_ / "t2.log"),
            0)
      << slurp(root_ / "t2.log");
  EXPECT_TRUE(fs::exists(root_ / "pred" / "predictions"));

  ASSERT_EQ(run("adapt --mode sattca --epochs 1 --data " + ds.string() + cfg + " --checkpoint " +
                    ckpt + " --out " + (root_ / "adapt").string(),
                root_ / "t3.log"),
            0)
      << slurp(root_ / "t3.log");
  const std::string resolved = slurp(root_ / "adapt" / "config.resolved");
  EXPECT_NE(resolved.find("\"sigma\": 0.5"), std::string::npos);
  EXPECT_NE(resolved.find("\"gamma\": 1.0"), std::string::npos);

  const auto ev = root_ / "eval";
  ASSERT_EQ(run("eval --modes none sattca --data " + ds.string() + cfg + " --checkpoint " + ckpt +
                    " --out " + ev.string(),
                root_ / "t4.log"),
            0)
      << slurp(root_ / "t4.log");
  for (const char* f : {"config.resolved", "metrics.table", "metrics.records", "traces.log",
                        "scatter.records", "checkpoint"})
    EXPECT_TRUE(fs::exists(ev / f)) << f;

  ASSERT_EQ(run("report --run " + ev.string() + " --compare none sattca", root_ / "t5.log"), 0)
      << slurp(root_ / "t5.log");
  const std::string rep = slurp(root_ / "t5.log");
  for (const char* bin : {"Micro", "Small", "Medium", "Mass", "dRecall"})
    EXPECT_NE(rep.find(bin), std::string::npos) << bin;
  EXPECT_EQ(run("report --run " + ev.string() + " --compare none ttca", root_ / "t6.log"), 2);
}

TEST_F(Cli, CorruptDataExitsWithThree) {
  const auto ds = root_ / "ds4";
  ASSERT_EQ(run("synth --cases 10 --seed 4 --out " + ds.string(), root_ / "c0.log"), 0);
  SegModel<float> m(NetworkConfig{.base_channels = 2}, 0);
  save_checkpoint(root_ / "c.ckpt", m);
  const auto test = read_manifest(ds).split(Split::kTest);
  auto bytes = read_file_bytes(ds / test[0].volume_path);
  bytes.resize(bytes.size() / 2);
  write_file_bytes(ds / test[0].volume_path, bytes);
  EXPECT_EQ(run("predict --data " + ds.string() + " --checkpoint " + (root_ / "c.ckpt").string() +
                    " --out " + (root_ / "c").string(),
                root_ / "c1.log"),
            3)
      << slurp(root_ / "c1.log");
  std::ofstream(root_ / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(run("predict --data " + ds.string() + " --checkpoint " + (root_ / "junk.ckpt").string() +
                    " --out " + (root_ / "c").string(),
                root_ / "c2.log"),
            3);
}

TEST_F(Cli, NumericalFailureExitsWithFour) {
  const auto ds = root_ / "ds5";
  ASSERT_EQ(run("synth --cases 10 --seed 5 --out " + ds.string(), root_ / "n0.log"), 0);
  SegModel<float> m(NetworkConfig{.base_channels = 2}, 0);
  for (auto& p : m.parameters())
    if (p.name == "head.bias") p.value(0) = 0.0f;
  save_checkpoint(root_ / "n.ckpt", m);
  std::ofstream(root_ / "huge.json") << R"({"adapt": {"step_size": 1e36, "epochs": 3}})";
  EXPECT_EQ(run("adapt --mode sattca --config " + (root_ / "huge.json").string() + " --data " +
                    ds.string() + " --checkpoint " + (root_ / "n.ckpt").string() + " --out " +
                    (root_ / "n").string(),
                root_ / "n1.log"),
            4)
      << slurp(root_ / "n1.log");
}
