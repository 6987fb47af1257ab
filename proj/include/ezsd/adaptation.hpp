#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ezsd/dataset.hpp"
#include "ezsd/encoder.hpp"

namespace ezsd {

struct AdaptConfig {
  double learning_rate = 1e-4;
  int batch_size = 4;
  int epochs = 12;
  double grad_norm_clip = 0.1;
  double enlarge_factor = 1.2;
  double weight_decay = 0.0;
  double temperature = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class CropSide { kBase, kNovel, kAll };

struct InstanceCrop {
  std::int64_t image_id = 0;
  std::int64_t annotation_id = 0;
  int category_id = 0;
  Box gt;
  Box crop_box;  // gt enlarged about its center, clipped to the image
  int label = 0; // index within the side's category ordering
  SizeBin size_bin = SizeBin::kSmall;
};

// One crop per annotation on the chosen side. kAll orders base then novel.
std::vector<InstanceCrop> collect_instance_crops(const Dataset& dataset, CropSide side, double enlarge_factor);

struct FinetuneResult {
  std::unique_ptr<Encoder> encoder;
  // Mean cross-entropy over all crops: entry 0 before training, entry e after epoch e.
  std::vector<double> epoch_losses;
  int steps = 0;
};

// Trains only the encoder's normalization partition with cross-entropy over
// cosine logits against `base_embeddings` (AdamW, global-norm clipping).
FinetuneResult finetune_layernorm(const Encoder& enc, const Dataset& dataset, const std::vector<InstanceCrop>& crops,
                                  const std::vector<TextEmbedding>& base_embeddings, const AdaptConfig& cfg,
                                  int workers = 1);

enum class AccSetting { kBase, kNovel, kGeneral };
enum class AccBin { kLarge, kMedium, kSmall, kAvg };
std::string_view to_string(AccSetting s);
std::string_view to_string(AccBin b);

struct AccCell {
  std::size_t count = 0;
  std::size_t correct = 0;
  std::optional<double> accuracy() const;
};

struct AccReport {
  std::map<std::pair<AccSetting, AccBin>, AccCell> cells;

  std::optional<double> accuracy(AccSetting s, AccBin b) const;
};

// Classifies GT instances of the setting's side against that side's text
// embeddings (general: all instances against base followed by novel names).
AccReport evaluate_instance_acc(const Encoder& enc, const Dataset& dataset, const std::vector<AccSetting>& settings,
                                double enlarge_factor, double temperature = 0.01,
                                const std::string& prompt_template = "a photo of a {name}", int workers = 1);

// CSV with columns setting,bin,count,accuracy. Cells without instances are omitted.
void write_acc_csv(const std::filesystem::path& path, const AccReport& report);

}  // namespace ezsd
