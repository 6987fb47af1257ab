#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ezsd/dataset.hpp"
#include "ezsd/encoder.hpp"
#include "ezsd/geometry.hpp"

namespace ezsd {

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ProposalSource { kAnchor, kBaseGt };
std::string_view to_string(ProposalSource s);

// pred_category value carried by appended ground-truth regions.
inline constexpr int kBaseGtCategory = -1;

struct ClipProposal {
  Box box;                 // original image coordinates
  double objectness = 1.0; // (0, 1]
  int pred_category = kBaseGtCategory;
  FeatureVector feature;
  ProposalSource source = ProposalSource::kAnchor;
};

enum class DictionaryMode { kAllCategories, kBasePlusListedNovel };

struct ProposalGenConfig {
  AnchorConfig anchors;
  ResizeSpec resize;
  double nms_iou = 0.5;
  std::size_t top_k = 1000;
  double base_gt_filter_iou = 0.7;
  double gt_enlarge_factor = 1.2;
  std::size_t train_subset_size = 200;
  double temperature = 0.01;
  DictionaryMode dictionary_mode = DictionaryMode::kAllCategories;
  std::vector<std::string> listed_novel;  // used by kBasePlusListedNovel
  std::uint64_t seed = 0;

  void validate() const;
};

// Category names scored during generation: base then novel (or the listed subset).
std::vector<std::string> build_dictionary(const DatasetSplit& split, const ProposalGenConfig& cfg);

// Anchors laid out on the resized frame, mapped back to the image, filtered
// against base GT, scored by the encoder, NMS + top-k selected, followed by
// the enlarged base GT boxes (objectness 1, source kBaseGt).
std::vector<ClipProposal> generate_clip_proposals(const Image& image, const std::vector<Box>& base_gt,
                                                  const Encoder& enc, const std::vector<TextEmbedding>& dictionary,
                                                  const ProposalGenConfig& cfg, int workers = 1);

// Fixed per-image subset: base GT proposals always kept; anchors sampled
// uniformly without replacement from a stream seeded by (seed, image_id).
// Output preserves input order.
std::vector<ClipProposal> sample_training_subset(const std::vector<ClipProposal>& proposals,
                                                 const ProposalGenConfig& cfg, std::int64_t image_id);

struct ImageProposals {
  std::int64_t image_id = 0;
  std::vector<ClipProposal> proposals;
};

struct ProposalStore {
  int dim = 0;
  std::vector<ImageProposals> images;

  const ImageProposals* find(std::int64_t image_id) const;
};

// Manifest (JSON lines) at `manifest`; features in the sibling ".bin" file.
std::filesystem::path store_blob_path(const std::filesystem::path& manifest);
void write_store(const std::filesystem::path& manifest, const ProposalStore& store);
ProposalStore read_store(const std::filesystem::path& manifest, std::optional<int> expected_dim = std::nullopt);

}  // namespace ezsd
