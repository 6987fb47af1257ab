#pragma once

#include <algorithm>
#include <map>
#include <random>

#include "ezsd/evalstats.hpp"
#include "support.hpp"

namespace ezsd::testing {

// Two base categories and one novel category on 100 x 100 images.
inline Dataset random_gt_dataset(std::mt19937_64& rng, int n_images) {
  Dataset ds;
  ds.split = {{"cat_a", "cat_b"}, {"cat_c"}};
  ds.categories = {{1, "cat_a"}, {2, "cat_b"}, {3, "cat_c"}};
  std::uniform_int_distribution<int> count(1, 4), cat(1, 3);
  std::int64_t ann = 1;
  for (int i = 1; i <= n_images; ++i) {
    ds.images.push_back({i, 100, 100, "img.ppm", nullptr});
    const int k = count(rng);
    for (int j = 0; j < k; ++j) ds.annotations.push_back({ann++, i, cat(rng), random_box(rng, 100.0, 4.0)});
  }
  ds.reindex();
  return ds;
}

// One exact detection per GT instance, all with distinct scores.
inline std::vector<Detection> perfect_detections(const Dataset& ds) {
  std::vector<Detection> out;
  double score = 1.0;
  for (const auto& a : ds.annotations) {
    out.push_back({a.image_id, a.category_id, a.box, score});
    score *= 0.97;
  }
  return out;
}

// Noisy detections: jittered GT copies plus random clutter.
inline std::vector<Detection> noisy_detections(std::mt19937_64& rng, const Dataset& ds) {
  std::vector<Detection> out;
  std::uniform_real_distribution<double> u(0.0, 1.0), jitter(-6.0, 6.0);
  for (const auto& a : ds.annotations) {
    if (u(rng) < 0.2) continue;
    Box b{a.box.x1 + jitter(rng), a.box.y1 + jitter(rng), a.box.x2 + jitter(rng), a.box.y2 + jitter(rng)};
    if (!b.valid()) b = a.box;
    out.push_back({a.image_id, a.category_id, b, u(rng)});
  }
  std::uniform_int_distribution<int> img(1, static_cast<int>(ds.images.size())), cat(1, 3);
  for (int i = 0; i < 8; ++i) out.push_back({img(rng), cat(rng), random_box(rng, 100.0, 4.0), u(rng)});
  return out;
}

// Reference AP: greedy matching in rank order, then for each of the 101 recall
// levels the best precision among ranks that reach it.
inline double oracle_ap(std::vector<Detection> dets, const Dataset& ds, int category_id, double thr) {
  dets.erase(std::remove_if(dets.begin(), dets.end(), [&](const Detection& d) { return d.category_id != category_id; }),
             dets.end());
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<const Annotation*> gt;
  for (const auto& a : ds.annotations)
    if (a.category_id == category_id) gt.push_back(&a);
  if (gt.empty()) return 0.0;
  std::vector<bool> used(gt.size(), false);
  std::vector<double> rec, prec;
  int tp = 0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    int best = -1;
    double best_iou = thr;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (used[g] || gt[g]->image_id != dets[k].image_id) continue;
      const double o = oracle_iou(dets[k].box, gt[g]->box);
      if (o >= best_iou) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    rec.push_back(double(tp) / gt.size());
    prec.push_back(double(tp) / (k + 1));
  }
  double sum = 0.0;
  for (int t = 0; t <= 100; ++t) {
    double p = 0.0;
    for (std::size_t k = 0; k < rec.size(); ++k)
      if (rec[k] >= t / 100.0 - 1e-12) p = std::max(p, prec[k]);
    sum += p;
  }
  return sum / 101.0;
}

}  // namespace ezsd::testing
