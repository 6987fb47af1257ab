#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "ezsd/dataset.hpp"
#include "ezsd/detector.hpp"
#include "ezsd/proposals.hpp"

namespace ezsd {

// Owns the decoded pixels that the samples point into.
struct TrainData {
  std::vector<Image> images;
  std::vector<TrainSample> samples;
};

// Images with at least one base annotation. With a store, each sample carries
// the image's fixed distillation subset; an image missing from the store is an error.
TrainData build_train_data(const Dataset& dataset, const ProposalStore* store, const ProposalGenConfig& subset_cfg);

struct TrainLogRow {
  int iter = 0;
  double lr = 0.0;
  LossBreakdown loss;  // mean over the batch images
};

double learning_rate_at(const DetectorConfig& cfg, int iter);
int total_iterations(const DetectorConfig& cfg, std::size_t num_samples);

// SGD over shuffled image batches; shuffling and RoI sampling derive from cfg.seed.
std::vector<TrainLogRow> train_detector(Detector& detector, const TrainData& data,
                                        const std::function<void(const TrainLogRow&)>& on_iter = {});

// Columns: iter,lr,L_dist,L_cls,L_reg,L,rpn_obj,rpn_reg
void write_loss_csv(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows);

}  // namespace ezsd
