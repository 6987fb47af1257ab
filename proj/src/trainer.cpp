#include "ezsd/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include "ezsd/util.hpp"

namespace ezsd {

TrainData build_train_data(const Dataset& dataset, const ProposalStore* store, const ProposalGenConfig& subset_cfg) {
  TrainData data;
  const auto records = filter_training_images(dataset.images, dataset);
  data.images.reserve(records.size());
  for (const auto& rec : records) {
    data.images.push_back(dataset.load_image(rec));
    TrainSample s;
    s.image_id = rec.id;
    s.image = &data.images.back();
    for (std::size_t idx : dataset.annotations_of(rec.id)) {
      const Annotation& a = dataset.annotations[idx];
      if (auto b = dataset.split.base_index(dataset.category_name(a.category_id))) s.gt.push_back({a.box, *b});
    }
    if (store) {
      const ImageProposals* ip = store->find(rec.id);
      if (!ip) throw StoreError("proposal store has no entry for training image " + std::to_string(rec.id));
      s.distill = sample_training_subset(ip->proposals, subset_cfg, rec.id);
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

double learning_rate_at(const DetectorConfig& cfg, int iter) {
  double lr = cfg.sgd.lr;
  for (int s : cfg.lr_steps)
    if (iter >= s) lr *= cfg.lr_gamma;
  if (iter < cfg.warmup_iters) {
    const double alpha = static_cast<double>(iter) / cfg.warmup_iters;
    lr *= cfg.warmup_ratio * (1.0 - alpha) + alpha;
  }
  return lr;
}

int total_iterations(const DetectorConfig& cfg, std::size_t num_samples) {
  if (cfg.max_iters > 0) return cfg.max_iters;
  if (num_samples == 0) return 0;
  const auto per_epoch = (num_samples + cfg.batch_size - 1) / cfg.batch_size;
  return static_cast<int>(per_epoch) * cfg.epochs;
}

std::vector<TrainLogRow> train_detector(Detector& detector, const TrainData& data,
                                        const std::function<void(const TrainLogRow&)>& on_iter) {
  const DetectorConfig& cfg = detector.config();
  const std::size_t n = data.samples.size();
  const int iters = total_iterations(cfg, n);
  std::vector<TrainLogRow> log;
  if (n == 0 || iters == 0) return log;
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;

  nn::Sgd sgd(detector.params());
  std::vector<std::size_t> order(n);
  for (int it = 0; it < iters; ++it) {
    const std::size_t slot = static_cast<std::size_t>(it) % per_epoch;
    if (slot == 0) {
      const auto epoch = static_cast<std::uint64_t>(it) / per_epoch;
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(derive_seed(cfg.seed, "train.shuffle", epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    const std::size_t begin = slot * cfg.batch_size;
    const std::size_t end = std::min(n, begin + cfg.batch_size);
    const double scale = 1.0 / static_cast<double>(end - begin);

    detector.zero_grad();
    TrainLogRow row;
    row.iter = it;
    row.lr = learning_rate_at(cfg, it);
    for (std::size_t b = begin; b < end; ++b) {
      const TrainSample& s = data.samples[order[b]];
      const auto seed = derive_seed(derive_seed(cfg.seed, "train.step", static_cast<std::uint64_t>(it)), "image",
                                    static_cast<std::uint64_t>(s.image_id));
      const LossBreakdown l = detector.accumulate(s, seed, scale);
      row.loss.dist += l.dist * scale;
      row.loss.cls += l.cls * scale;
      row.loss.reg += l.reg * scale;
      row.loss.rpn_obj += l.rpn_obj * scale;
      row.loss.rpn_reg += l.rpn_reg * scale;
    }
    sgd.step(cfg.sgd, row.lr);
    if (on_iter) on_iter(row);
    log.push_back(row);
  }
  return log;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write loss log: " + path.string());
  out << "iter,lr,L_dist,L_cls,L_reg,L,rpn_obj,rpn_reg\n" << std::setprecision(9);
  for (const auto& r : rows)
    out << r.iter << "," << r.lr << "," << r.loss.dist << "," << r.loss.cls << "," << r.loss.reg << ","
        << r.loss.total() << "," << r.loss.rpn_obj << "," << r.loss.rpn_reg << "\n";
  if (!out) throw std::runtime_error("failed writing loss log: " + path.string());
}

}  // namespace ezsd
