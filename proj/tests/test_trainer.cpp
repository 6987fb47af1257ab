#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "detector_fixtures.hpp"

using namespace ezsd;
using namespace ezsd::testing;

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Trainer, LearningRateSchedule) {
  DetectorConfig c;
  c.sgd.lr = 0.02;
  c.warmup_iters = 500;
  c.warmup_ratio = 1e-3;
  c.lr_steps = {8000, 11000};
  c.lr_gamma = 0.1;
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 0), 0.02 * 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 250), 0.02 * (1e-3 * 0.5 + 0.5));
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 500), 0.02);
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 7999), 0.02);
  EXPECT_NEAR(learning_rate_at(c, 8000), 0.002, 1e-15);
  EXPECT_NEAR(learning_rate_at(c, 11000), 0.0002, 1e-15);
  c.warmup_iters = 0;
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 0), 0.02);
}

TEST(Trainer, IterationCount) {
  DetectorConfig c;
  c.batch_size = 4;
  c.epochs = 12;
  EXPECT_EQ(total_iterations(c, 10), 36);
  EXPECT_EQ(total_iterations(c, 8), 24);
  EXPECT_EQ(total_iterations(c, 0), 0);
  c.max_iters = 5;
  EXPECT_EQ(total_iterations(c, 10), 5);
}

TEST(Trainer, SingleIterationLogsOneFiniteRow) {
  auto& t = toy_set();
  DetectorConfig cfg = tiny_detector_config();
  cfg.max_iters = 1;
  Detector det = t.make(cfg);
  int calls = 0;
  const auto log = train_detector(det, *t.data, [&](const TrainLogRow&) { ++calls; });
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(calls, 1);
  TempDir dir("trainer");
  write_loss_csv(dir / "loss.csv", log);
  const auto rows = read_csv(dir / "loss.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"iter", "lr", "L_dist", "L_cls", "L_reg", "L", "rpn_obj", "rpn_reg"}));
  ASSERT_EQ(rows[1].size(), 8u);
  for (const auto& cell : rows[1]) EXPECT_TRUE(std::isfinite(std::stod(cell))) << cell;
  EXPECT_GT(log[0].loss.dist, 0.0);
  EXPECT_NEAR(log[0].loss.total(), log[0].loss.dist + log[0].loss.cls + log[0].loss.reg, 1e-12);
}

TEST(Trainer, WithoutDistillationTheDistColumnIsZero) {
  auto& t = toy_set();
  DetectorConfig cfg = tiny_detector_config();
  cfg.max_iters = 3;
  cfg.distill = false;
  Detector det = t.make(cfg);
  for (const auto& row : train_detector(det, *t.data)) {
    EXPECT_EQ(row.loss.dist, 0.0);
    EXPECT_TRUE(std::isfinite(row.loss.cls));
  }
}

TEST(Trainer, RunsAreBitwiseReproducible) {
  auto& t = toy_set();
  DetectorConfig cfg = tiny_detector_config();
  cfg.max_iters = 4;
  TempDir dir("trainer_det");
  for (const char* tag : {"a", "b"}) {
    Detector det = t.make(cfg);
    write_loss_csv(dir / (std::string(tag) + ".csv"), train_detector(det, *t.data));
    det.save(dir / (std::string(tag) + ".ckpt"), {});
  }
  EXPECT_EQ(read_bytes(dir / "a.csv"), read_bytes(dir / "b.csv"));
  EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "b.ckpt"));

  cfg.seed = 99;
  Detector other = t.make(cfg);
  write_loss_csv(dir / "c.csv", train_detector(other, *t.data));
  EXPECT_NE(read_bytes(dir / "a.csv"), read_bytes(dir / "c.csv"));
}

TEST(Trainer, StoreMustCoverEveryTrainingImage) {
  auto& t = toy_set();
  ProposalStore partial = t.store;
  const auto first = t.data->samples.front().image_id;
  std::erase_if(partial.images, [&](const ImageProposals& ip) { return ip.image_id == first; });
  EXPECT_THROW(build_train_data(t.ds, &partial, t.pc), StoreError);
  const TrainData plain = build_train_data(t.ds, nullptr, t.pc);
  for (const auto& s : plain.samples) {
    EXPECT_TRUE(s.distill.empty());
    EXPECT_FALSE(s.gt.empty());
    EXPECT_EQ(s.image, &plain.images[static_cast<std::size_t>(&s - plain.samples.data())]);
  }
}

TEST(Trainer, DistillationSubsetIsFixedPerImage) {
  auto& t = toy_set();
  const TrainData again = build_train_data(t.ds, &t.store, t.pc);
  ASSERT_EQ(again.samples.size(), t.data->samples.size());
  for (std::size_t i = 0; i < again.samples.size(); ++i) {
    const auto& a = again.samples[i].distill;
    const auto& b = t.data->samples[i].distill;
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].box, b[k].box);
  }
}
