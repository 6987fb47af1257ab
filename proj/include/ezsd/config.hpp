#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ezsd/adaptation.hpp"
#include "ezsd/dataset.hpp"
#include "ezsd/detector.hpp"
#include "ezsd/encoder.hpp"
#include "ezsd/proposals.hpp"

namespace ezsd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Environment variable that overrides encoder.checkpoint.
inline constexpr const char* kEncoderCheckpointEnv = "EZSD_ENCODER_CHECKPOINT";

struct DatasetPaths {
  std::string train_annotations;  // empty: <toy.out_dir>/train/annotations.json
  std::string eval_annotations;   // empty: <toy.out_dir>/eval/annotations.json
  std::string split_config;       // empty: split.json next to the train annotations
};

struct ToyConfig {
  ToyOptions options;
  int n_eval_images = 0;
  std::string out_dir;  // empty: <output_dir>/toy
};

struct EvalConfig {
  double iou_threshold = 0.5;
  std::string format = "csv";  // csv | json
};

struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  std::string output_dir = "ezsd_out";
  double temperature = 0.01;  // shared by objectness scoring, training and inference
  std::string prompt_template = "a photo of a {name}";
  DatasetPaths dataset;
  ToyConfig toy;
  EncoderSpec encoder;
  AdaptConfig adapt;
  ProposalGenConfig proposals;
  DetectorConfig detector;
  EvalConfig eval;

  // Fills derived paths and propagates the global seed and temperature.
  void resolve();
  void validate() const;

  std::filesystem::path out(const std::string& name) const { return std::filesystem::path(output_dir) / name; }
};

nlohmann::json to_json(const RunConfig& cfg);
// Keys absent from `j` keep their current values; unknown keys are rejected.
void update_from_json(RunConfig& cfg, const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);

// Applies "a.b.c=value" where value parses as JSON (bare words become strings).
void apply_override(RunConfig& cfg, const std::string& assignment);

}  // namespace ezsd
