#include "ezsd/proposals.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "ezsd/util.hpp"

namespace ezsd {

std::string_view to_string(ProposalSource s) { return s == ProposalSource::kAnchor ? "anchor" : "base_gt"; }

void ProposalGenConfig::validate() const {
  anchors.validate();
  resize.validate();
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(nms_iou) || !in_unit(base_gt_filter_iou)) throw StoreError("proposal thresholds must lie in [0, 1]");
  if (top_k == 0) throw StoreError("top_k must be positive");
  if (!(gt_enlarge_factor > 0.0) || !(temperature > 0.0)) throw StoreError("invalid proposal config");
}

std::vector<std::string> build_dictionary(const DatasetSplit& split, const ProposalGenConfig& cfg) {
  std::vector<std::string> names = split.base;
  if (cfg.dictionary_mode == DictionaryMode::kAllCategories) {
    names.insert(names.end(), split.novel.begin(), split.novel.end());
  } else {
    for (const auto& n : cfg.listed_novel) {
      if (!split.novel_index(n)) throw DatasetError("listed novel category '" + n + "' is not in the split");
      names.push_back(n);
    }
  }
  return names;
}

std::vector<ClipProposal> generate_clip_proposals(const Image& image, const std::vector<Box>& base_gt,
                                                  const Encoder& enc, const std::vector<TextEmbedding>& dictionary,
                                                  const ProposalGenConfig& cfg, int workers) {
  cfg.validate();
  if (dictionary.empty()) throw EncoderError("proposal dictionary is empty");
  for (const auto& e : dictionary)
    if (static_cast<int>(e.values.size()) != enc.dim())
      throw EncoderError("dictionary embedding '" + e.category_name + "' does not match encoder dimension");

  const double W = image.width;
  const double H = image.height;
  const auto resized = resize_keep_ratio(image.width, image.height, cfg.resize);

  std::vector<Box> candidates;
  for (const Box& a : generate_anchors(resized.width, resized.height, cfg.anchors)) {
    const Box mapped = clip_to_image({a.x1 / resized.scale, a.y1 / resized.scale, a.x2 / resized.scale,
                                      a.y2 / resized.scale},
                                     W, H);
    if (!mapped.valid()) continue;
    const bool redundant = std::any_of(base_gt.begin(), base_gt.end(),
                                       [&](const Box& g) { return iou(mapped, g) > cfg.base_gt_filter_iou; });
    if (!redundant) candidates.push_back(mapped);
  }

  auto features = encode_image_regions(enc, image, candidates, workers);
  std::vector<double> objectness(candidates.size());
  std::vector<int> preds(candidates.size());
  parallel_for(candidates.size(), workers, [&](std::size_t i) {
    const auto cls = classify_feature(features[i], dictionary, cfg.temperature);
    preds[i] = cls.pred;
    objectness[i] = cls.scores[cls.pred];
  });

  auto keep = nms(candidates, objectness, cfg.nms_iou);
  if (keep.size() > cfg.top_k) keep.resize(cfg.top_k);

  std::vector<ClipProposal> out;
  out.reserve(keep.size() + base_gt.size());
  for (std::size_t i : keep)
    out.push_back({candidates[i], objectness[i], preds[i], std::move(features[i]), ProposalSource::kAnchor});

  const Box bounds{0.0, 0.0, W, H};
  for (const Box& g : base_gt) {
    const Box region = enlarge(g, cfg.gt_enlarge_factor, bounds);
    out.push_back({region, 1.0, kBaseGtCategory, encode_image_region(enc, image, region), ProposalSource::kBaseGt});
  }
  return out;
}

std::vector<ClipProposal> sample_training_subset(const std::vector<ClipProposal>& proposals,
                                                 const ProposalGenConfig& cfg, std::int64_t image_id) {
  std::vector<std::size_t> anchors;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (proposals[i].source == ProposalSource::kBaseGt)
      ++n_gt;
    else
      anchors.push_back(i);
  }
  const std::size_t budget = cfg.train_subset_size > n_gt ? cfg.train_subset_size - n_gt : 0;
  std::vector<char> selected(proposals.size(), 0);
  if (anchors.size() <= budget) {
    for (std::size_t i : anchors) selected[i] = 1;
  } else {
    std::mt19937_64 rng(derive_seed(cfg.seed, "proposals.subset", static_cast<std::uint64_t>(image_id)));
    for (std::size_t k = 0; k < budget; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, anchors.size() - 1);
      std::swap(anchors[k], anchors[pick(rng)]);
      selected[anchors[k]] = 1;
    }
  }
  std::vector<ClipProposal> out;
  for (std::size_t i = 0; i < proposals.size(); ++i)
    if (selected[i] || proposals[i].source == ProposalSource::kBaseGt) out.push_back(proposals[i]);
  return out;
}

const ImageProposals* ProposalStore::find(std::int64_t image_id) const {
  for (const auto& ip : images)
    if (ip.image_id == image_id) return &ip;
  return nullptr;
}

}  // namespace ezsd
