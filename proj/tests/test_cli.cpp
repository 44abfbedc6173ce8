#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliRun {
  int code = -1;
  std::string output;
};

CliRun cli(const std::string& args) {
  const std::string cmd = std::string(DUDO_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint32_t u32_at(const std::string& bytes, std::size_t off) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
  return v;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("dudo_cli_" + std::to_string(::getpid()) + "_" +
                                         ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string dir(const std::string& name) const { return (root_ / name).string(); }

  // Small dataset shared by the train and eval tests.
  std::string tiny_data(const std::string& name = "data") const {
    const CliRun r = cli("gen-data --seed 4 --size 16 --train 4 --val 2 --test 3 --out " + dir(name));
    EXPECT_EQ(r.code, 0) << r.output;
    return dir(name);
  }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("analyze --k 1..4 --out " + dir("a")).code, 2);
  EXPECT_EQ(cli("analyze --k 2..x --out " + dir("a")).code, 2);
  EXPECT_EQ(cli("analyze --acs 1.5 --out " + dir("a")).code, 2);
  EXPECT_EQ(cli("mask --accel 0.5 --out " + dir("m")).code, 2);
  EXPECT_EQ(cli("gen-data --size 0 --out " + dir("g")).code, 2);
}

TEST_F(Cli, DataErrorsExitThree) {
  EXPECT_EQ(cli("eval --zero-fill --data " + dir("missing")).code, 3);
  fs::create_directories(dir("junk"));
  std::ofstream(dir("junk") + "/test.cplx") << "definitely not a container";
  EXPECT_EQ(cli("eval --zero-fill --data " + dir("junk")).code, 3);
  std::ofstream(dir("bad.json")) << "{ not json";
  EXPECT_EQ(cli("--config " + dir("bad.json") + " mask --out " + dir("m")).code, 2);
  std::ofstream(dir("unknown.json")) << R"({"modle": {}})";
  EXPECT_NE(cli("--config " + dir("unknown.json") + " mask --out " + dir("m")).code, 0);
}

TEST_F(Cli, EvalNeedsExactlyOneSource) {
  const std::string data = tiny_data();
  EXPECT_EQ(cli("eval --data " + data).code, 2);
  EXPECT_EQ(cli("eval --zero-fill --checkpoint x.ckpt --data " + data).code, 2);
}

TEST_F(Cli, MaskMatchesSerializedForm) {
  const CliRun r = cli("--seed 3 --accel 4 --acs 0.125 mask --height 32 --out " + dir("m"));
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string text = slurp(dir("m") + "/mask.txt");
  EXPECT_EQ(text.rfind("32,4,0.125,3,", 0), 0u) << text;
  const std::string bits = text.substr(text.rfind(',') + 1, 32);
  EXPECT_EQ(std::count(bits.begin(), bits.end(), '1'), 8);
  EXPECT_EQ(bits.substr(14, 4), "1111");
}

TEST_F(Cli, GenDataIsByteIdenticalAndManifestMatchesHeaders) {
  const std::string a = tiny_data("a"), b = tiny_data("b");
  const json manifest = json::parse(slurp(a + "/manifest.json"));
  for (const char* split : {"train", "val", "test"}) {
    const std::string bytes = slurp(a + "/" + split + ".cplx");
    EXPECT_EQ(bytes, slurp(b + "/" + split + ".cplx")) << split;
    ASSERT_GE(bytes.size(), 20u);
    EXPECT_EQ(bytes.substr(0, 4), "CPLX");
    EXPECT_EQ(u32_at(bytes, 8), manifest["splits"][split]["count"].get<std::uint32_t>()) << split;
    EXPECT_EQ(u32_at(bytes, 12), 16u);
    EXPECT_EQ(bytes.size(), 20u + u32_at(bytes, 8) * 16u * 16u * 8u);
  }
  EXPECT_EQ(slurp(a + "/manifest.json"), slurp(b + "/manifest.json"));

  ASSERT_EQ(cli("--seed 5 gen-data --size 16 --train 4 --val 2 --test 3 --out " + dir("c")).code, 0);
  EXPECT_NE(slurp(a + "/train.cplx"), slurp(dir("c") + "/train.cplx"));
}

TEST_F(Cli, AnalyzeSingleCellAndBoundaries) {
  const CliRun r = cli("analyze --k 4 --a 4 --acs 0 --trials 20000 --out " + dir("an"));
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string csv = slurp(dir("an") + "/feasibility.csv");
  // p = 3/4 with no ACS; P = 1 - p^4 - 4 p^3 (1 - p) = 67/256.
  EXPECT_EQ(csv, "k,a,P\n4,4,0.261719\n");
  const json s = json::parse(slurp(dir("an") + "/feasibility_summary.json"));
  EXPECT_EQ(s["cells"], 1);
  EXPECT_EQ(s["min_accel_max_P_below_0.5"], 4.0);
  EXPECT_LT(s["max_abs_diff"].get<double>(), 0.02);

  ASSERT_EQ(cli("analyze --k 2,8 --a 1 --trials 1000 --out " + dir("one")).code, 0);
  EXPECT_EQ(slurp(dir("one") + "/feasibility_mc.csv"),
            "k,a,P,P_mc,abs_diff\n2,1,1.000000,1.000000,0.000000\n8,1,1.000000,1.000000,0.000000\n");
  const json none = json::parse(slurp(dir("one") + "/feasibility_summary.json"));
  EXPECT_TRUE(none["min_accel_max_P_below_0.5"].is_null());
}

TEST_F(Cli, ZeroFillEvalIsDeterministic) {
  const std::string data = tiny_data();
  ASSERT_EQ(cli("--seed 2 eval --zero-fill --data " + data + " --export-pgm --out " + dir("e1")).code, 0);
  ASSERT_EQ(cli("--seed 2 eval --zero-fill --data " + data + " --out " + dir("e2")).code, 0);
  EXPECT_EQ(slurp(dir("e1") + "/metrics.csv"), slurp(dir("e2") + "/metrics.csv"));
  const json j = json::parse(slurp(dir("e1") + "/metrics.json"));
  EXPECT_EQ(j["method"], "zero_fill");
  EXPECT_EQ(j["count"], 3);
  const std::string csv = slurp(dir("e1") + "/metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_TRUE(fs::exists(dir("e1") + "/recon.pgm"));
  EXPECT_EQ(slurp(dir("e1") + "/recon.pgm").substr(0, 3), "P5\n");
}

TEST_F(Cli, TrainThenEvalCheckpoint) {
  const std::string data = tiny_data();
  std::ofstream(dir("cfg.json")) << R"({"model": {"block": {"channels": 4, "growth": 2, "heads": 2, "plde_hidden": 4}},
                                       "train": {"batch": 2}})";
  const std::string common = "--seed 1 --config " + dir("cfg.json") + " train --epochs 2 --data " + data;
  const CliRun t1 = cli(common + " --out " + dir("t1"));
  ASSERT_EQ(t1.code, 0) << t1.output;
  ASSERT_EQ(cli(common + " --out " + dir("t2")).code, 0);
  EXPECT_EQ(slurp(dir("t1") + "/train_log.csv"), slurp(dir("t2") + "/train_log.csv"));
  EXPECT_EQ(slurp(dir("t1") + "/last.ckpt"), slurp(dir("t2") + "/last.ckpt"));

  const std::string ev = "eval --data " + data + " --checkpoint " + dir("t1") + "/best.ckpt --out ";
  ASSERT_EQ(cli(ev + dir("e1")).code, 0);
  ASSERT_EQ(cli(ev + dir("e2")).code, 0);
  EXPECT_EQ(slurp(dir("e1") + "/metrics.csv"), slurp(dir("e2") + "/metrics.csv"));
  EXPECT_EQ(json::parse(slurp(dir("e1") + "/metrics.json"))["method"], "model");

  std::ofstream(dir("t1") + "/broken.ckpt") << slurp(dir("t1") + "/best.ckpt").substr(0, 40);
  EXPECT_EQ(cli("eval --data " + data + " --checkpoint " + dir("t1") + "/broken.ckpt --out " + dir("e3")).code, 3);
}
