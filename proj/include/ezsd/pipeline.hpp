#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "ezsd/config.hpp"
#include "ezsd/evalstats.hpp"
#include "ezsd/trainer.hpp"

namespace ezsd {

// Carries the failing stage and the artifact it was working on.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, std::string artifact, const std::string& message)
      : std::runtime_error(stage + ": " + message + (artifact.empty() ? "" : " [artifact: " + artifact + "]")),
        stage_(std::move(stage)),
        artifact_(std::move(artifact)) {}
  const std::string& stage() const { return stage_; }
  const std::string& artifact() const { return artifact_; }

 private:
  std::string stage_;
  std::string artifact_;
};

struct MakeToySummary {
  std::filesystem::path train_dir;
  std::filesystem::path eval_dir;  // empty without eval images
  std::size_t train_images = 0;
  std::size_t train_annotations = 0;
  std::size_t eval_images = 0;
  std::size_t eval_annotations = 0;
};

struct AdaptSummary {
  std::filesystem::path checkpoint;
  std::filesystem::path before_csv;
  std::filesystem::path after_csv;
  AccReport before;
  AccReport after;
  std::vector<double> epoch_losses;
};

struct GenProposalsSummary {
  std::filesystem::path manifest;
  std::size_t images = 0;
  std::map<std::size_t, std::size_t> count_histogram;  // proposals per image -> images
};

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
  std::vector<TrainLogRow> log;
};

struct EvalSummary {
  std::filesystem::path report;
  EvalResult result;
  std::size_t detections = 0;
};

struct StatsSummary {
  std::filesystem::path report;
  IoGtReport result;
};

// Artifact names inside RunConfig::output_dir.
inline constexpr const char* kEncoderCheckpoint = "encoder.ckpt";
inline constexpr const char* kAccBeforeCsv = "acc_before.csv";
inline constexpr const char* kAccAfterCsv = "acc_after.csv";
inline constexpr const char* kStoreManifest = "proposals.jsonl";
inline constexpr const char* kDetectorCheckpoint = "detector.ckpt";
inline constexpr const char* kLossCsv = "train_loss.csv";

// Each command expects a resolved config and throws PipelineError on failure.
MakeToySummary cmd_make_toy(const RunConfig& cfg);
AdaptSummary cmd_adapt(const RunConfig& cfg);
GenProposalsSummary cmd_gen_proposals(const RunConfig& cfg);
TrainSummary cmd_train(const RunConfig& cfg);
EvalSummary cmd_eval(const RunConfig& cfg, const std::optional<std::filesystem::path>& checkpoint = std::nullopt);
StatsSummary cmd_stats(const RunConfig& cfg, const std::optional<std::filesystem::path>& store = std::nullopt);

// Maps detector output slots (base then novel names) to dataset detections.
std::vector<Detection> to_dataset_detections(const std::vector<SlotDetection>& dets, std::int64_t image_id,
                                             const Dataset& dataset);

}  // namespace ezsd
