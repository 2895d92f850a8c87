#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fixtures.hpp"
#include "hpnet/data.hpp"

using namespace hpnet;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string output;  // stdout and stderr
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(HPNET_CLI_PATH) + " " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::size_t count_named(const fs::path& root, const std::string& filename) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) n += e.path().filename() == filename;
  return n;
}

const std::string kTrainFlags =
    " --channels 4,6 --pools 2,2 --adapter-channels 4 --epochs-conv 1 --epochs-all 1 --epochs-convex 1"
    " --epochs-convex-final 2 --projection-period 1 --batch-size 8 --prototypes-per-child 2 --quiet";

class CliTest : public ::testing::Test {
 protected:
  static fs::path dir_;

  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "hpnet_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    SyntheticSpec spec = pinned_synthetic_spec();
    spec.image_size = 16;
    spec.train_per_class = 4;
    spec.val_per_class = 2;
    spec.test_per_class = 2;
    spec.novel_per_class = 2;
    std::ofstream(dir_ / "small.json") << spec.to_json();
    const CliRun synth = run("synth --synthetic " + (dir_ / "small.json").string() + " --out " + (dir_ / "synth").string());
    ASSERT_EQ(synth.code, 0) << synth.output;
    const CliRun train = run("train --taxonomy " + tax() + data() + " --out " + (dir_ / "run").string() + kTrainFlags);
    ASSERT_EQ(train.code, 0) << train.output;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string tax() { return (dir_ / "synth" / "taxonomy.json").string(); }
  static std::string data() { return " --synthetic " + (dir_ / "synth" / "spec.json").string(); }
  static std::string ckpt() { return " --checkpoint " + (dir_ / "run" / "model.hpn").string(); }
};

fs::path CliTest::dir_;

}  // namespace

TEST_F(CliTest, MissingTaxonomyExitsTwoAndNamesThePath) {
  const std::string missing = (dir_ / "nope" / "taxonomy.json").string();
  const CliRun r = run("train --taxonomy " + missing + data() + " --out " + (dir_ / "x").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find(missing), std::string::npos) << r.output;
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --taxonomy " + tax() + " --out " + (dir_ / "x").string()).code, 2);
  EXPECT_EQ(run("train --taxonomy " + tax() + data() + " --data " + dir_.string() + " --out " + (dir_ / "x").string())
                .code,
            2);
  EXPECT_EQ(run("train --taxonomy " + tax() + data() + " --out " + (dir_ / "x").string() + " --channels 4,a").code, 2);
  EXPECT_EQ(run("novelty" + ckpt() + data() + " --kind Forest --out " + (dir_ / "x").string()).code, 2);
  EXPECT_EQ(run("eval --checkpoint " + (dir_ / "missing.hpn").string() + data()).code, 2);
}

TEST_F(CliTest, CheckpointForAnotherTaxonomyRefused) {
  std::ofstream(dir_ / "other.json") << fixtures::kVehicleAnimal;
  const CliRun r = run("eval" + ckpt() + " --taxonomy " + (dir_ / "other.json").string() + data());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("taxonomy"), std::string::npos) << r.output;
}

TEST_F(CliTest, TrainWritesItsArtifacts) {
  const fs::path out = dir_ / "run";
  EXPECT_TRUE(fs::exists(out / "model.hpn"));
  EXPECT_TRUE(fs::exists(out / "projection.json"));
  const auto cfg = nlohmann::json::parse(slurp(out / "config.json"));
  EXPECT_EQ(cfg["seed"], 7);
  EXPECT_EQ(cfg["schedule"]["epochs_all"], 1);
  EXPECT_EQ(cfg["model"]["prototypes_per_child"], 2);
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(manifest["splits"]["train"].size(), 24u);

  std::istringstream log(slurp(out / "train.log"));
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "epoch,phase,loss_total,loss_ce,loss_clust,loss_sep,loss_reg,loss_ceda,val_fine_acc");
  std::size_t rows = 0;
  while (std::getline(log, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8) << line;
  }
  // conv + convex(1), all + convex(2).
  EXPECT_EQ(rows, 1u + 1u + 1u + 2u);
}

TEST_F(CliTest, TrainTwiceGivesTheSameBytes) {
  const CliRun r = run("train --taxonomy " + tax() + data() + " --out " + (dir_ / "again").string() + kTrainFlags);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(dir_ / "again" / "model.hpn"), slurp(dir_ / "run" / "model.hpn"));
  EXPECT_EQ(slurp(dir_ / "again" / "train.log"), slurp(dir_ / "run" / "train.log"));
}

TEST_F(CliTest, EvalWritesMetrics) {
  const fs::path out = dir_ / "eval";
  const CliRun r = run("eval" + ckpt() + " --taxonomy " + tax() + data() + " --k 3 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string text = slurp(out / "metrics.txt");
  EXPECT_EQ(text, r.output);
  EXPECT_EQ(text.rfind("f_id=", 0), 0u);
  EXPECT_NE(text.find("c_novel="), std::string::npos);
  const auto doc = nlohmann::json::parse(slurp(out / "metrics.json"));
  EXPECT_EQ(doc["n_id"], 12);
  EXPECT_EQ(doc["n_novel"], 12);
  EXPECT_GE(doc["f_id"].get<double>(), 0.0);
  EXPECT_LE(doc["f_id"].get<double>(), 1.0);
}

TEST_F(CliTest, ExplainAndNeighborsWriteFiles) {
  const fs::path out = dir_ / "explain_out";
  CliRun r = run("explain" + ckpt() + data() + " --limit 2 --top-k 2 --projection " +
              (dir_ / "run" / "projection.json").string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(count_named(out / "explain", "explanation.json"), 2u);
  std::size_t pngs = 0;
  for (const auto& e : fs::recursive_directory_iterator(out / "explain")) pngs += e.path().extension() == ".png";
  // Two levels per image, two prototypes per level.
  EXPECT_EQ(pngs, 2u * 2u * 2u);

  r = run("explain" + ckpt() + data() + " --image-id no/such/id --out " + out.string());
  EXPECT_EQ(r.code, 2);

  r = run("neighbors" + ckpt() + data() + " --parent square --prototype 1 --k 3 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const fs::path nb = out / "neighbors" / "square_1";
  const auto doc = nlohmann::json::parse(slurp(nb / "neighbors.json"));
  EXPECT_EQ(doc["neighbors"].size(), 3u);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(nb)) files += e.path().extension() == ".png";
  EXPECT_EQ(files, 3u);

  r = run("neighbors" + ckpt() + data() + " --parent lamp --out " + out.string());
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, NoveltyWritesReportAndSidecar) {
  const fs::path out = dir_ / "novelty";
  const CliRun r = run("novelty" + ckpt() + data() + " --kind PbThreshold --holdout 2 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string text = slurp(out / "loco.txt");
  EXPECT_EQ(text.rfind("detector=PbThreshold", 0), 0u);
  EXPECT_NE(text.find("overall_accuracy="), std::string::npos);
  const auto loco = nlohmann::json::parse(slurp(out / "loco.json"));
  EXPECT_EQ(loco["parents"].size(), 3u);
  const auto side = nlohmann::json::parse(slurp(out / "detectors.json"));
  EXPECT_FALSE(side.empty());
}
