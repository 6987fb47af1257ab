#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ezsd/encoder.hpp"
#include "ezsd/geometry.hpp"
#include "ezsd/image.hpp"
#include "ezsd/losses.hpp"
#include "ezsd/nn.hpp"
#include "ezsd/proposals.hpp"

namespace ezsd {

class DetectorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DetectorConfig {
  // Backbone: one 3x3 conv + ReLU per entry; total stride must equal feature_stride.
  std::vector<int> backbone_channels{32, 64, 64, 64};
  std::vector<int> backbone_strides{2, 2, 2, 1};
  int feature_stride = 8;
  int pooled = 7;
  int sampling_ratio = 2;
  int head_conv_channels = 64;  // both branches
  int cls_hidden = 256;          // Conv_c hidden linear width
  int reg_dim = 256;             // d_r

  // Proposal network.
  AnchorConfig rpn_anchors{8, {16, 32, 64}, {1.0, 2.0, 0.5}};
  double rpn_fg_iou = 0.7;
  double rpn_bg_iou = 0.3;
  int rpn_batch = 256;
  double rpn_pos_fraction = 0.5;
  double rpn_nms = 0.7;
  int rpn_pre_nms_train = 2000;
  int rpn_post_nms_train = 1000;
  int rpn_pre_nms_test = 1000;
  int rpn_post_nms_test = 1000;
  double rpn_min_size = 1.0;

  // RoI assignment and sampling.
  double fg_iou = 0.5;
  int roi_batch = 512;
  double roi_pos_fraction = 0.25;

  double temperature = 0.01;
  bool distill = true;
  bool normalize_distill = false;

  // Optimization.
  nn::SgdConfig sgd;
  int batch_size = 4;
  int epochs = 12;
  int max_iters = 0;  // > 0 overrides epochs
  int warmup_iters = 500;
  double warmup_ratio = 1e-3;
  std::vector<int> lr_steps;
  double lr_gamma = 0.1;

  // Inference.
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_dets = 100;
  bool bg_suppression = true;  // a winning BG slot drops the proposal

  std::uint64_t seed = 0;

  void validate() const;
};

struct GtInstance {
  Box box;
  int label = 0;  // base-category index
};

// One training image with its fixed distillation subset (empty without distillation).
struct TrainSample {
  std::int64_t image_id = 0;
  const Image* image = nullptr;
  std::vector<GtInstance> gt;
  std::vector<ClipProposal> distill;
};

struct SlotDetection {
  Box box;
  int slot = 0;  // inference-mode slot: base block then novel block
  double score = 0.0;
};

struct RoiAssignment {
  std::vector<Box> boxes;
  std::vector<int> labels;  // base index or background (= number of base categories)
  std::vector<BoxDeltas> targets;
};

// Labels proposals against base GT: IoU >= fg_iou takes the matched GT's label
// and delta target, everything else is background. Samples at most `batch`
// proposals with the configured foreground fraction, preserving input order.
RoiAssignment assign_proposals(const std::vector<Box>& proposals, const std::vector<GtInstance>& gt, int num_base,
                               double fg_iou, int batch, double pos_fraction, std::mt19937_64& rng);

// Standard delta-encoded anchor layout of the proposal network: cells row-major,
// then sizes, then ratios; unclipped.
std::vector<Box> rpn_anchor_layout(int feat_h, int feat_w, const AnchorConfig& cfg);

// Turns per-region classifier features and regression features into
// detections: inference-mode cosine softmax, argmax category, BG suppression,
// semantic box refinement with the predicted class embedding, class-wise NMS.
std::vector<SlotDetection> decode_detections(const std::vector<Box>& proposals, const RowMatrix& features,
                                             const RowMatrix& reg_features, const TextClassifierState& state,
                                             const SemanticRegressor& regressor, double image_w, double image_h,
                                             const DetectorConfig& cfg);

class Detector {
 public:
  Detector(const DetectorConfig& cfg, const std::vector<TextEmbedding>& base);

  const DetectorConfig& config() const { return cfg_; }
  int embed_dim() const { return embed_dim_; }
  int num_base() const { return static_cast<int>(base_names_.size()); }
  const std::vector<std::string>& base_names() const { return base_names_; }

  std::vector<nn::Param*> params();
  // Classifier state with the current background vector; novel block empty.
  TextClassifierState text_state() const;
  const RowMatrix& base_embeddings() const { return base_; }
  SemanticRegressor regressor() const;

  void zero_grad();
  // Forward + backward on one image; gradients are scaled by `grad_scale` and
  // accumulated. Returns unscaled per-image losses.
  LossBreakdown accumulate(const TrainSample& sample, std::uint64_t step_seed, double grad_scale);

  // Conv_c output for arbitrary regions (distillation features), no gradient.
  RowMatrix region_features(const Image& image, const std::vector<Box>& boxes) const;
  std::vector<Box> propose(const Image& image) const;

  // Novel embeddings extend the classifier for this call only.
  std::vector<SlotDetection> infer(const Image& image, const std::vector<TextEmbedding>& novel) const;

  void save(const std::filesystem::path& path, const nlohmann::json& meta) const;
  static Detector load(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

 private:
  struct Forward;
  struct HeadOut;

  nn::Tensor preprocess(const Image& image) const;
  nn::Tensor backbone_forward(const nn::Tensor& x, std::vector<nn::Conv2d::Cache>* caches,
                              std::vector<nn::Tensor>* acts) const;
  std::vector<Box> rpn_proposals(const nn::Tensor& obj, const nn::Tensor& deltas, int image_w, int image_h,
                                 int pre_nms, int post_nms) const;
  void build(std::uint64_t seed);

  DetectorConfig cfg_;
  int embed_dim_ = 0;
  std::vector<std::string> base_names_;
  RowMatrix base_;

  std::vector<nn::Conv2d> backbone_;
  nn::Conv2d rpn_conv_, rpn_cls_, rpn_reg_;
  nn::Conv2d cls_conv1_, cls_conv2_;
  nn::Linear cls_fc1_, cls_fc2_;
  nn::Conv2d reg_conv1_, reg_conv2_;
  nn::Linear reg_fc_;
  nn::Param reg_out_w_, reg_out_b_;  // semantic regressor: 4 x (d_r + D)
  nn::Param background_;
};

nlohmann::json to_json(const DetectorConfig& cfg);
// Missing keys keep the values already in `cfg`; unknown keys are rejected.
void update_from_json(DetectorConfig& cfg, const nlohmann::json& j);

}  // namespace ezsd
