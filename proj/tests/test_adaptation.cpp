#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "ezsd/adaptation.hpp"
#include "support.hpp"

using namespace ezsd;
using namespace ezsd::testing;

namespace {

const Dataset& toy() {
  static TempDir dir("adapt");
  static const Dataset ds = [] {
    ToyOptions opts;
    opts.n_images = 40;
    return make_toy_dataset(dir.path(), opts);
  }();
  return ds;
}

const std::vector<AccSetting> kAll{AccSetting::kBase, AccSetting::kNovel, AccSetting::kGeneral};

AdaptConfig fast_config() {
  AdaptConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 4;
  return cfg;
}

}  // namespace

TEST(Adaptation, CropsFollowSideAndOrdering) {
  const Dataset& ds = toy();
  const auto base = collect_instance_crops(ds, CropSide::kBase, 1.2);
  const auto novel = collect_instance_crops(ds, CropSide::kNovel, 1.2);
  const auto all = collect_instance_crops(ds, CropSide::kAll, 1.2);
  EXPECT_EQ(base.size() + novel.size(), ds.annotations.size());
  ASSERT_EQ(all.size(), ds.annotations.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_EQ(all[i].annotation_id, base[i].annotation_id);
    EXPECT_EQ(ds.split.base[static_cast<std::size_t>(base[i].label)], ds.category_name(base[i].category_id));
  }
  for (const auto& c : novel) EXPECT_EQ(ds.split.novel[static_cast<std::size_t>(c.label)], ds.category_name(c.category_id));
  for (std::size_t i = 0; i < novel.size(); ++i)
    EXPECT_EQ(all[base.size() + i].label, static_cast<int>(ds.split.base.size()) + novel[i].label);
  for (const auto& c : base) {
    EXPECT_NEAR(c.crop_box.center_x(), c.gt.center_x(), 0.5 * 0.2 * c.gt.width() + 1e-9);
    EXPECT_LE(c.crop_box.x2, 128.0);
  }
}

TEST(Adaptation, CalibratedMockScoresPerfectly) {
  const Dataset& ds = toy();
  const MockEncoder enc({0, 32, 32});
  const auto r = evaluate_instance_acc(enc, ds, kAll, 1.2);
  for (AccSetting s : kAll) EXPECT_DOUBLE_EQ(r.accuracy(s, AccBin::kAvg).value(), 1.0);
}

TEST(Adaptation, ZeroEpochsLeavesEncoderUnchanged) {
  const Dataset& ds = toy();
  MockEncoder enc({0, 32, 32});
  miscalibrate(enc, 1);
  AdaptConfig cfg = fast_config();
  cfg.epochs = 0;
  const auto crops = collect_instance_crops(ds, CropSide::kBase, cfg.enlarge_factor);
  const auto res = finetune_layernorm(enc, ds, crops, encode_text(enc, ds.split.base), cfg);
  const auto before = enc.parameters();
  const auto after = res.encoder->parameters();
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].array.data, after[i].array.data);
  EXPECT_EQ(res.epoch_losses.size(), 1u);
  const auto ra = evaluate_instance_acc(enc, ds, kAll, 1.2);
  const auto rb = evaluate_instance_acc(*res.encoder, ds, kAll, 1.2);
  for (const auto& [key, cell] : ra.cells) EXPECT_EQ(rb.cells.at(key).correct, cell.correct);
}

TEST(Adaptation, OnlyNormalizationParametersMove) {
  const Dataset& ds = toy();
  MockEncoder enc({2, 32, 32});
  miscalibrate(enc, 2);
  const AdaptConfig cfg = fast_config();
  const auto crops = collect_instance_crops(ds, CropSide::kBase, cfg.enlarge_factor);
  const auto res = finetune_layernorm(enc, ds, crops, encode_text(enc, ds.split.base), cfg);
  const auto before = enc.parameters();
  const auto after = res.encoder->parameters();
  bool norm_changed = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    ASSERT_EQ(before[i].array.name, after[i].array.name);
    if (before[i].normalization)
      norm_changed |= before[i].array.data != after[i].array.data;
    else
      EXPECT_EQ(0, std::memcmp(before[i].array.data.data(), after[i].array.data.data(),
                               before[i].array.data.size() * sizeof(float)))
          << before[i].array.name;
  }
  EXPECT_TRUE(norm_changed);
  EXPECT_LT(res.epoch_losses.back(), res.epoch_losses.front());
}

TEST(Adaptation, FinetuneIsDeterministic) {
  const Dataset& ds = toy();
  MockEncoder enc({3, 32, 32});
  miscalibrate(enc, 3);
  AdaptConfig cfg = fast_config();
  cfg.seed = 9;
  const auto crops = collect_instance_crops(ds, CropSide::kBase, cfg.enlarge_factor);
  const auto text = encode_text(enc, ds.split.base);
  const auto a = finetune_layernorm(enc, ds, crops, text, cfg, 1);
  const auto b = finetune_layernorm(enc, ds, crops, text, cfg, 3);
  const auto pa = a.encoder->parameters(), pb = b.encoder->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].array.data, pb[i].array.data);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
}

TEST(Adaptation, RepairsMiscalibration) {
  const Dataset& ds = toy();
  MockEncoder enc({1, 32, 32});
  miscalibrate(enc, 1);
  const AdaptConfig cfg = fast_config();
  const auto before = evaluate_instance_acc(enc, ds, {AccSetting::kGeneral}, 1.2);
  const auto crops = collect_instance_crops(ds, CropSide::kBase, cfg.enlarge_factor);
  const auto res = finetune_layernorm(enc, ds, crops, encode_text(enc, ds.split.base), cfg);
  const auto after = evaluate_instance_acc(*res.encoder, ds, {AccSetting::kGeneral}, 1.2);
  EXPECT_GT(after.accuracy(AccSetting::kGeneral, AccBin::kAvg).value(),
            before.accuracy(AccSetting::kGeneral, AccBin::kAvg).value());
}

TEST(Adaptation, RejectsBadInputs) {
  const Dataset& ds = toy();
  const MockEncoder enc({0, 32, 32});
  const auto crops = collect_instance_crops(ds, CropSide::kBase, 1.2);
  const auto text = encode_text(enc, ds.split.base);
  EXPECT_THROW(finetune_layernorm(enc, ds, {}, text, fast_config()), EncoderError);
  AdaptConfig bad = fast_config();
  bad.learning_rate = -1;
  EXPECT_THROW(finetune_layernorm(enc, ds, crops, text, bad), EncoderError);
  const auto novel_crops = collect_instance_crops(ds, CropSide::kAll, 1.2);
  EXPECT_THROW(finetune_layernorm(enc, ds, novel_crops, text, fast_config()), EncoderError);
}

TEST(Adaptation, AccCsvShape) {
  const Dataset& ds = toy();
  const MockEncoder enc({0, 32, 32});
  TempDir dir("acc");
  const auto r = evaluate_instance_acc(enc, ds, kAll, 1.2);
  write_acc_csv(dir / "acc.csv", r);
  std::ifstream in(dir / "acc.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "setting,bin,count,accuracy");
  std::size_t rows = 0, nonempty = 0;
  while (std::getline(in, line)) ++rows;
  for (const auto& [key, cell] : r.cells) nonempty += cell.count > 0;
  EXPECT_EQ(rows, nonempty);
  EXPECT_LE(rows, 12u);
}
