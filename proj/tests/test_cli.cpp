#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cntl/cli.hpp"

using namespace cntl;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

const char* kTiny =
    "gen.subjects = 4\ngen.slices_min = 3\ngen.slices_max = 3\ngen.height = 48\ngen.width = 64\n"
    "arch.width_divisor = 16\ntrain.max_epochs = 2\ntrain.batch_size = 3\ntrain.crop_height = 32\n"
    "train.crop_width = 48\ncv.folds = 2\n";

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "cntl_test_cli";
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(root_ / "tiny.conf") << kTiny;
    ASSERT_EQ(cli({"generate", "--config", conf(), "--out", path("data")}).code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }
  static std::string conf() { return (root_ / "tiny.conf").string(); }
  static std::string path(const std::string& p) { return (root_ / p).string(); }
  static fs::path root_;
};
fs::path CliTest::root_;

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"generate"}).code, 1);  // --out missing
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, UnknownArchListsValidNames) {
  const CliResult r = cli({"inspect", "--arch", "resnet"});
  EXPECT_EQ(r.code, 1);
  for (const char* n : {"hed", "casenet", "dsfpn", "upinet"}) EXPECT_NE(r.err.find(n), std::string::npos) << r.err;
}

TEST(Cli, InspectHedCounts) {
  const CliResult r = cli({"inspect", "--arch", "hed", "--set", "arch.input_channels=3", "--input", "320x480"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("backbone 14,714,688"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("(1 MAC = 1 FLOP)"), std::string::npos);
  EXPECT_NE(r.out.find("(1 MAC = 2 FLOPs)"), std::string::npos);
  EXPECT_EQ(cli({"inspect", "--arch", "hed", "--input", "320x47"}).code, 1);
  EXPECT_EQ(cli({"inspect", "--arch", "hed", "--input", "big"}).code, 1);
}

TEST(Cli, ConfigCommand) {
  const CliResult r = cli({"config"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen.subjects (default 49)"), std::string::npos);
  const CliResult e = cli({"config", "--effective", "--set", "train.batch_size=5"});
  EXPECT_NE(e.out.find("train.batch_size = 5"), std::string::npos);
}

TEST_F(CliTest, GenerateIsDeterministicAndGuarded) {
  EXPECT_EQ(cli({"generate", "--config", conf(), "--out", path("data")}).code, 1);  // non-empty
  ASSERT_EQ(cli({"generate", "--config", conf(), "--out", path("g7a"), "--seed", "7"}).code, 0);
  ASSERT_EQ(cli({"generate", "--config", conf(), "--out", path("g7b"), "--seed", "7"}).code, 0);
  EXPECT_EQ(slurp(path("g7a") + "/manifest.json"), slurp(path("g7b") + "/manifest.json"));
  EXPECT_EQ(slurp(path("g7a") + "/s002/img_001.png"), slurp(path("g7b") + "/s002/img_001.png"));
  const std::string before = slurp(path("g7a") + "/manifest.json");
  ASSERT_EQ(cli({"generate", "--config", conf(), "--out", path("g7a"), "--seed", "7", "--force"}).code, 0);
  EXPECT_EQ(slurp(path("g7a") + "/manifest.json"), before);
  EXPECT_NE(slurp(path("g7a") + "/config.conf").find("gen.seed = 7"), std::string::npos);
}

TEST_F(CliTest, GenerateDefaultSubjectCount) {
  const CliResult r = cli({"config", "--effective"});
  EXPECT_NE(r.out.find("gen.subjects = 49"), std::string::npos);
}

TEST_F(CliTest, UnwritableOutputLeavesNoManifest) {
  const fs::path blocker = root_ / "blocker";
  std::ofstream(blocker) << "x";
  const CliResult r = cli({"generate", "--config", conf(), "--out", (blocker / "d").string()});
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_FALSE(fs::exists(blocker / "d" / "manifest.json"));
}

TEST_F(CliTest, MissingMaskNamesPath) {
  fs::copy(root_ / "data", root_ / "broken", fs::copy_options::recursive);
  fs::remove(root_ / "broken" / "s001" / "mask_002.png");
  const CliResult r = cli({"train", "--config", conf(), "--data", path("broken"), "--out", path("x_missing")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("s001/mask_002.png"), std::string::npos) << r.err;
}

TEST_F(CliTest, DivergenceExitsThree) {
  const CliResult r = cli({"train", "--config", conf(), "--data", path("data"), "--out", path("x_div"), "--set",
                     "train.learning_rate=1e30"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainEvalAndSnapshot) {
  ASSERT_EQ(cli({"train", "--config", conf(), "--data", path("data"), "--out", path("tr")}).code, 0);
  const fs::path ckpt = root_ / "tr" / "fold_00" / "checkpoint.cntl";
  ASSERT_TRUE(fs::exists(ckpt));

  // snapshot alone reproduces the run
  ASSERT_EQ(cli({"train", "--config", path("tr") + "/config.conf", "--out", path("tr2")}).code, 0);
  EXPECT_EQ(slurp(ckpt), slurp(root_ / "tr2" / "fold_00" / "checkpoint.cntl"));
  EXPECT_EQ(slurp(root_ / "tr" / "fold_00" / "results.csv"), slurp(root_ / "tr2" / "fold_00" / "results.csv"));

  const CliResult e = cli({"eval", "--checkpoint", ckpt.string(), "--data", path("data"), "--out", path("ev"), "--predictions",
                     path("ev") + "/pred"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_TRUE(fs::exists(root_ / "ev" / "results.csv"));
  EXPECT_TRUE(fs::exists(root_ / "ev" / "pred" / "s003" / "pred_002.png"));
  const auto summary = nlohmann::json::parse(slurp(root_ / "ev" / "summary.json"));
  const double t = summary["ods_threshold"];
  EXPECT_GE(t, 0.01 - 1e-12);
  EXPECT_LE(t, 0.99 + 1e-12);
  EXPECT_NEAR(t * 100, std::round(t * 100), 1e-9);
  EXPECT_EQ(summary["images"], 12);

  // --no-thin leaves predictions alone and is deterministic
  for (const char* d : {"ev_nt1", "ev_nt2"})
    ASSERT_EQ(cli({"eval", "--checkpoint", ckpt.string(), "--data", path("data"), "--out", path(d), "--no-thin",
                   "--predictions", path(d) + "/pred"})
                  .code,
              0);
  EXPECT_EQ(slurp(root_ / "ev_nt1" / "results.csv"), slurp(root_ / "ev_nt2" / "results.csv"));
  EXPECT_EQ(slurp(root_ / "ev" / "pred" / "s000" / "pred_001.png"),
            slurp(root_ / "ev_nt1" / "pred" / "s000" / "pred_001.png"));
  EXPECT_FALSE(nlohmann::json::parse(slurp(root_ / "ev_nt1" / "summary.json"))["thin"].get<bool>());
}

TEST_F(CliTest, EvalOfReferenceMasksIsPerfect) {
  const CliResult r = cli({"eval", "--use-masks", "--data", path("data"), "--out", path("ev_gt")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto s = nlohmann::json::parse(slurp(root_ / "ev_gt" / "summary.json"));
  EXPECT_DOUBLE_EQ(s["ods"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(s["ois"].get<double>(), 1.0);
  EXPECT_EQ(cli({"eval", "--data", path("data"), "--out", path("ev_none")}).code, 1);
}

TEST_F(CliTest, CheckpointSpecMismatch) {
  ASSERT_EQ(cli({"train", "--config", conf(), "--data", path("data"), "--out", path("tr_mm")}).code, 0);
  auto d = read_checkpoint(root_ / "tr_mm" / "fold_00" / "checkpoint.cntl");
  auto spec = ArchitectureSpec::parse(d.spec_text);
  spec.fuse_channels = 16;  // same tensor list, different head shapes
  d.spec_text = spec.canonical();
  write_checkpoint(root_ / "bad.cntl", d);
  const CliResult r = cli({"eval", "--checkpoint", path("bad.cntl"), "--data", path("data"), "--out", path("ev_bad")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("does not match"), std::string::npos) << r.err;
}

TEST_F(CliTest, TuneRunsFourteenTrials) {
  const CliResult r = cli({"tune", "--config", conf(), "--data", path("data"), "--out", path("tune"), "--set",
                     "train.max_steps=1"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t trials = 0;
  std::istringstream is(r.out);
  std::string line, last;
  while (std::getline(is, line)) {
    if (line.rfind("trial ", 0) == 0) ++trials;
    if (!line.empty()) last = line;
  }
  EXPECT_EQ(trials, 14u);
  EXPECT_EQ(last.rfind("chosen m=", 0), 0u) << last;
  EXPECT_NE(last.find("N_G="), std::string::npos);
  EXPECT_NE(last.find("N_C="), std::string::npos);
  const std::string csv = slurp(root_ / "tune" / "search.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 15);
  EXPECT_TRUE(fs::exists(root_ / "tune" / "tuned.conf"));
}

TEST_F(CliTest, CrossValidationAndReport) {
  ASSERT_EQ(cli({"cv", "--config", conf(), "--data", path("data"), "--out", path("cv")}).code, 0);
  for (int i = 0; i < 2; ++i) EXPECT_TRUE(fs::exists(root_ / "cv" / fold_dir_name(i) / "results.csv"));
  EXPECT_TRUE(fs::exists(root_ / "cv" / "aggregate.json"));
  EXPECT_TRUE(fs::exists(root_ / "cv" / "config.conf"));
  // rerun with --force is byte-identical
  const std::string agg = slurp(root_ / "cv" / "aggregate.json");
  ASSERT_EQ(cli({"cv", "--config", conf(), "--data", path("data"), "--out", path("cv"), "--force"}).code, 0);
  EXPECT_EQ(slurp(root_ / "cv" / "aggregate.json"), agg);

  fs::create_directories(root_ / "unfinished");
  const CliResult one = cli({"report", "--runs", path("cv"), path("unfinished"), "--out", path("rep1")});
  ASSERT_EQ(one.code, 0) << one.err;
  EXPECT_NE(one.err.find("unfinished"), std::string::npos);
  const auto rows = nlohmann::json::parse(slurp(root_ / "rep1" / "report.json"));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0]["ods"].size(), 2u);
  for (const char* f : {"fold_ods.png", "fold_ods.svg", "fold_ois.png", "fold_ois.svg", "report.txt"})
    EXPECT_TRUE(fs::exists(root_ / "rep1" / f)) << f;

  EXPECT_EQ(cli({"report", "--runs", path("unfinished"), "--out", path("rep2")}).code, 2);
}
