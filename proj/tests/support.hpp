#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "ezsd/dataset.hpp"
#include "ezsd/encoder.hpp"
#include "ezsd/geometry.hpp"
#include "ezsd/util.hpp"

namespace ezsd::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ezsd_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void flip_byte(const std::filesystem::path& p, std::streamoff offset) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(offset);
  const char c = static_cast<char>(f.get());
  f.seekp(offset);
  f.put(static_cast<char>(c ^ 0x5a));
}

// Boxes with corners inside [0, extent], width and height at least min_side.
inline Box random_box(std::mt19937_64& rng, double extent, double min_side = 0.5) {
  std::uniform_real_distribution<double> u(0.0, extent - min_side);
  const double x1 = u(rng), y1 = u(rng);
  std::uniform_real_distribution<double> w(min_side, extent - x1), h(min_side, extent - y1);
  return {x1, y1, x1 + w(rng), y1 + h(rng)};
}

// Integer-cornered boxes on a small grid; produces exact ties and shared edges.
inline Box random_grid_box(std::mt19937_64& rng, int grid) {
  std::uniform_int_distribution<int> c(0, grid - 1);
  const int x1 = c(rng), y1 = c(rng);
  std::uniform_int_distribution<int> w(1, grid - x1), h(1, grid - y1);
  return {double(x1), double(y1), double(x1 + w(rng)), double(y1 + h(rng))};
}

// Intersection area by coordinate compression: the plane is cut at every box
// edge and each elementary cell is tested for membership in both boxes.
inline double oracle_intersection(const Box& a, const Box& b) {
  std::vector<double> xs{a.x1, a.x2, b.x1, b.x2}, ys{a.y1, a.y2, b.y1, b.y2};
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  auto inside = [](const Box& r, double x, double y) { return r.x1 <= x && x <= r.x2 && r.y1 <= y && y <= r.y2; };
  double area = 0.0;
  for (int i = 0; i + 1 < 4; ++i)
    for (int j = 0; j + 1 < 4; ++j) {
      const double w = xs[i + 1] - xs[i], h = ys[j + 1] - ys[j];
      if (w <= 0 || h <= 0) continue;
      const double mx = 0.5 * (xs[i] + xs[i + 1]), my = 0.5 * (ys[j] + ys[j + 1]);
      if (inside(a, mx, my) && inside(b, mx, my)) area += w * h;
    }
  return area;
}

inline double oracle_iou(const Box& a, const Box& b) {
  const double inter = oracle_intersection(a, b);
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double oracle_iogt(const Box& p, const Box& gt) {
  const double g = (gt.x2 - gt.x1) * (gt.y2 - gt.y1);
  return g > 0 ? oracle_intersection(p, gt) / g : 0.0;
}

// Reference NMS: repeatedly pick the best remaining box (lowest index on ties)
// and discard everything overlapping it above the threshold, O(n^2).
inline std::vector<std::size_t> oracle_nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                           double thr) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<std::size_t> keep;
  for (;;) {
    std::size_t best = boxes.size();
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (alive[i] && (best == boxes.size() || scores[i] > scores[best])) best = i;
    if (best == boxes.size()) break;
    keep.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (alive[i] && oracle_iou(boxes[best], boxes[i]) > thr) alive[i] = false;
  }
  return keep;
}

// Central finite difference of f at x along coordinate i.
template <typename F, typename V>
double central_difference(F&& f, V x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double fp = f(x);
  x[i] = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

// Scrambles the normalization partition of a mock encoder: log-uniform gains
// in [e^-2.5, e^2.5] and uniform biases in [-2, 2].
// Descriptor slots any base crop activates: backdrop, base colors, shape moments.
inline std::vector<int> base_visible_dims(const DatasetSplit& split) {
  std::set<int> dims{0};
  const auto& colors = toy_color_table();
  for (const auto& name : split.base)
    for (std::size_t c = 0; c < colors.size(); ++c)
      if (name.rfind(colors[c].first + "_", 0) == 0) dims.insert(static_cast<int>(c) + 1);
  for (int k = MockEncoder::kPaletteSize; k < MockEncoder::kDescriptorSize; ++k) dims.insert(k);
  return {dims.begin(), dims.end()};
}

// Random gains exp(2.5u) and biases 2u on `dims` (all slots when empty).
inline void miscalibrate(MockEncoder& enc, std::uint64_t seed, std::uint64_t attempt = 0,
                         const std::vector<int>& dims = {}) {
  std::mt19937_64 rng(derive_seed(seed, "test.miscalibrate", attempt));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<float> gain(MockEncoder::kDescriptorSize, 1.0f), bias(MockEncoder::kDescriptorSize, 0.0f);
  for (std::size_t k = 0; k < gain.size(); ++k) {
    const double g = std::exp(2.5 * u(rng)), b = 2.0 * u(rng);
    if (!dims.empty() && std::find(dims.begin(), dims.end(), static_cast<int>(k)) == dims.end()) continue;
    gain[k] = static_cast<float>(g);
    bias[k] = static_cast<float>(b);
  }
  enc.set_normalization(gain, bias);
}

// Softmax mass of the best dictionary entry, recomputed in double precision.
inline double oracle_objectness(const FeatureVector& f, const std::vector<TextEmbedding>& dict, double tau) {
  std::vector<double> cos;
  double fn = 0;
  for (float v : f) fn += double(v) * v;
  for (const auto& e : dict) {
    double dot = 0, en = 0;
    for (std::size_t k = 0; k < f.size(); ++k) {
      dot += double(f[k]) * e.values[k];
      en += double(e.values[k]) * e.values[k];
    }
    cos.push_back(dot / std::sqrt(fn * en));
  }
  const double mx = *std::max_element(cos.begin(), cos.end());
  double z = 0;
  for (double c : cos) z += std::exp((c - mx) / tau);
  return 1.0 / z;
}

inline double relative_error(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

}  // namespace ezsd::testing
