#include <gtest/gtest.h>

#include "cli_support.hpp"
#include "ezsd/pipeline.hpp"
#include "support.hpp"

using namespace ezsd;
using namespace ezsd::testing;

namespace {

// One pipeline directory shared by the command tests, built on first use.
struct CliRun {
  TempDir dir{"cli"};
  std::filesystem::path raw = dir / "raw.json";
  std::filesystem::path config = dir / "run.json";
  bool ok = false;

  CliRun() {
    write_config(raw, tiny_run_config(dir / "out"));
    write_config(config, adapted(tiny_run_config(dir / "out")));
    ok = run_cli("--config " + shell_quote(raw.string()) + " make-toy", dir / "log.txt") == 0 &&
         run_cli("--config " + shell_quote(raw.string()) + " adapt", dir / "log.txt") == 0 && cli("gen-proposals") == 0 &&
         cli("train") == 0;
  }
  int cli(const std::string& args) const {
    return run_cli("--config " + shell_quote(config.string()) + " " + args, dir / "log.txt");
  }
  std::filesystem::path out(const std::string& name) const { return dir / "out" / name; }
  std::string log() const { return read_bytes(dir / "log.txt"); }
};

CliRun& cli_run() {
  static CliRun r;
  return r;
}

}  // namespace

TEST(Config, OverridesAndUnknownKeys) {
  RunConfig c;
  apply_override(c, "detector.sgd.lr=0.5");
  apply_override(c, "proposals.anchors.sizes=[8,16]");
  apply_override(c, "prompt_template=a {name}");
  EXPECT_EQ(c.detector.sgd.lr, 0.5);
  EXPECT_EQ(c.proposals.anchors.sizes, (std::vector<double>{8, 16}));
  EXPECT_EQ(c.prompt_template, "a {name}");
  EXPECT_THROW(apply_override(c, "detector.sgd.lrr=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "nonsense"), ConfigError);
  EXPECT_THROW(apply_override(c, "workers=\"x\""), ConfigError);
  EXPECT_THROW(update_from_json(c, nlohmann::json{{"toy", {{"split", {{"extra", 1}}}}}}), ConfigError);
  EXPECT_THROW(update_from_json(c, nlohmann::json{{"proposals", {{"dictionary_mode", "bogus"}}}}), ConfigError);
}

TEST(Config, JsonRoundTripAndResolve) {
  RunConfig c = tiny_run_config("somewhere");
  RunConfig back;
  update_from_json(back, to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  c.seed = 5;
  c.resolve();
  EXPECT_EQ(c.detector.seed, 5u);
  EXPECT_EQ(c.proposals.temperature, 0.05);
  EXPECT_EQ(std::filesystem::path(c.dataset.train_annotations), std::filesystem::path("somewhere/toy/train/annotations.json"));
  EXPECT_NO_THROW(c.validate());
  c.eval.format = "xml";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Cli, PrintConfigReproducesItself) {
  TempDir dir("cli_print");
  const std::string first = (dir / "a.json").string(), second = (dir / "b.json").string();
  ASSERT_EQ(run_cli("--seed 3 --set detector.max_iters=4 --output-dir " + shell_quote((dir / "o").string()) +
                        " --print-config train",
                    first),
            0);
  ASSERT_EQ(run_cli("--config " + shell_quote(first) + " --print-config train", second), 0);
  EXPECT_EQ(read_bytes(first), read_bytes(second));
  const auto j = nlohmann::json::parse(read_bytes(first));
  EXPECT_EQ(j.at("seed"), 3);
  EXPECT_EQ(j.at("detector").at("max_iters"), 4);
}

TEST(Cli, RejectsBadInvocations) {
  TempDir dir("cli_bad");
  EXPECT_NE(run_cli("", dir / "l"), 0);
  EXPECT_NE(run_cli("--set bogus.key=1 train", dir / "l"), 0);
  EXPECT_NE(read_bytes(dir / "l").find("bogus"), std::string::npos);
  EXPECT_NE(run_cli("--workers 0 train", dir / "l"), 0);
  EXPECT_NE(run_cli("no-such-command", dir / "l"), 0);
}

TEST(Cli, MissingEncoderCheckpointNamesStageAndArtifact) {
  TempDir dir("cli_missing");
  const RunConfig c = adapted(tiny_run_config(dir / "out"));
  write_config(dir / "c.json", c);
  ASSERT_EQ(run_cli("--config " + shell_quote((dir / "c.json").string()) + " make-toy", dir / "l"), 0);
  EXPECT_EQ(run_cli("--config " + shell_quote((dir / "c.json").string()) + " gen-proposals", dir / "l"), 1);
  const std::string log = read_bytes(dir / "l");
  EXPECT_NE(log.find("gen-proposals"), std::string::npos) << log;
  EXPECT_NE(log.find("encoder.ckpt"), std::string::npos) << log;
}

TEST(Cli, PipelineProducesArtifacts) {
  auto& r = cli_run();
  ASSERT_TRUE(r.ok) << r.log();
  for (const char* name : {kEncoderCheckpoint, kAccBeforeCsv, kAccAfterCsv, kStoreManifest, kDetectorCheckpoint, kLossCsv})
    EXPECT_TRUE(std::filesystem::exists(r.out(name))) << name;
  ASSERT_EQ(r.cli("eval"), 0) << r.log();
  EXPECT_TRUE(std::filesystem::exists(r.out("eval.csv")));
  ASSERT_EQ(r.cli("stats --format json"), 0) << r.log();
  const auto j = nlohmann::json::parse(read_bytes(r.out("iogt.json")));
  EXPECT_FALSE(j.empty());
}

TEST(Cli, EvalWithNoDetectionsSucceeds) {
  auto& r = cli_run();
  ASSERT_TRUE(r.ok) << r.log();
  ASSERT_EQ(r.cli("--set detector.score_threshold=1.01 eval"), 0) << r.log();
  const auto rows = read_eval_report(r.out("eval.csv"), ReportFormat::kCsv);
  ASSERT_FALSE(rows.empty());
  for (const auto& row : rows) EXPECT_EQ(row.ap, 0.0);
  EXPECT_NE(r.cli("eval --checkpoint " + shell_quote(r.out("nope.ckpt").string())), 0);
}

TEST(Cli, StatsOnGroundTruthStoreIsOne) {
  auto& r = cli_run();
  ASSERT_TRUE(r.ok) << r.log();
  const RunConfig cfg = [&] {
    RunConfig c = load_run_config(r.config);
    c.resolve();
    return c;
  }();
  const DatasetSplit split = read_split_config(cfg.dataset.split_config);
  const Dataset train = load_coco_json(cfg.dataset.train_annotations, split);
  ProposalStore store;
  store.dim = 2;
  for (const auto& rec : train.images) {
    ImageProposals ip{rec.id, {}};
    for (std::size_t i : train.annotations_of(rec.id))
      ip.proposals.push_back({train.annotations[i].box, 1.0, 0, {0.5f, 0.5f}, ProposalSource::kAnchor});
    store.images.push_back(ip);
  }
  TempDir dir("gtstore");
  write_store(dir / "gt.jsonl", store);
  ASSERT_EQ(r.cli("stats --store " + shell_quote((dir / "gt.jsonl").string())), 0) << r.log();
  const auto rows = read_metric_report(r.out("iogt.csv"), ReportFormat::kCsv);
  ASSERT_EQ(rows.front().metric, "mean_iogt");
  if (rows.front().value) { EXPECT_DOUBLE_EQ(*rows.front().value, 1.0); }
}

TEST(Cli, CorruptStoreFailsTraining) {
  auto& r = cli_run();
  ASSERT_TRUE(r.ok) << r.log();
  TempDir dir("corrupt");
  RunConfig c = load_run_config(r.config);
  c.output_dir = dir.path().string();
  c.toy.out_dir = (r.dir / "out" / "toy").string();
  write_config(dir / "c.json", c);
  std::filesystem::copy_file(r.out(kStoreManifest), dir / kStoreManifest);
  std::filesystem::copy_file(store_blob_path(r.out(kStoreManifest)), store_blob_path(dir / kStoreManifest));
  flip_byte(store_blob_path(dir / kStoreManifest), 9);
  EXPECT_EQ(run_cli("--config " + shell_quote((dir / "c.json").string()) + " train", dir / "l"), 1);
  EXPECT_NE(read_bytes(dir / "l").find(kStoreManifest), std::string::npos) << read_bytes(dir / "l");
}

TEST(Cli, CommandsAreDeterministic) {
  auto& r = cli_run();
  ASSERT_TRUE(r.ok) << r.log();
  TempDir dir("cli_repeat");
  write_config(dir / "raw.json", tiny_run_config(dir / "out"));
  write_config(dir / "c.json", adapted(tiny_run_config(dir / "out")));
  for (const char* cmd : {"make-toy", "adapt", "gen-proposals", "train"}) {
    const char* file = std::string(cmd) == "make-toy" || std::string(cmd) == "adapt" ? "raw.json" : "c.json";
    ASSERT_EQ(run_cli("--workers 2 --config " + shell_quote((dir / file).string()) + " " + cmd, dir / "l"), 0)
        << cmd << read_bytes(dir / "l");
  }
  for (const char* name : {kEncoderCheckpoint, kAccAfterCsv, kStoreManifest, kDetectorCheckpoint, kLossCsv})
    EXPECT_EQ(read_bytes(r.out(name)), read_bytes(dir / "out" / name)) << name;
  EXPECT_EQ(read_bytes(store_blob_path(r.out(kStoreManifest))), read_bytes(store_blob_path(dir / "out" / kStoreManifest)));
}
