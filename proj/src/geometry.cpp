#include "ezsd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ezsd {

std::string to_string(const Box& box) {
  std::ostringstream os;
  os << "[" << box.x1 << ", " << box.y1 << ", " << box.x2 << ", " << box.y2 << "]";
  return os.str();
}

void AnchorConfig::validate() const {
  if (!(stride > 0.0)) throw GeometryError("anchor stride must be positive");
  if (sizes.empty() || ratios.empty()) throw GeometryError("anchor sizes and ratios must be non-empty");
  for (double s : sizes)
    if (!(s > 0.0)) throw GeometryError("anchor sizes must be positive");
  for (double r : ratios)
    if (!(r > 0.0)) throw GeometryError("anchor ratios must be positive");
}

void ResizeSpec::validate() const {
  if (max_short_edge <= 0 || max_long_edge < max_short_edge)
    throw GeometryError("resize spec requires max_long_edge >= max_short_edge > 0");
}

Box clip(const Box& box, const Box& bounds) {
  return {std::clamp(box.x1, bounds.x1, bounds.x2), std::clamp(box.y1, bounds.y1, bounds.y2),
          std::clamp(box.x2, bounds.x1, bounds.x2), std::clamp(box.y2, bounds.y1, bounds.y2)};
}

Box clip_to_image(const Box& box, double width, double height) {
  return clip(box, Box{0.0, 0.0, width, height});
}

Box enlarge(const Box& box, double factor, const std::optional<Box>& bounds) {
  if (!(factor > 0.0)) throw GeometryError("enlarge factor must be positive");
  if (!box.valid()) throw GeometryError("enlarge on invalid box " + to_string(box));
  const double cx = box.center_x();
  const double cy = box.center_y();
  const double hw = 0.5 * box.width() * factor;
  const double hh = 0.5 * box.height() * factor;
  Box out{cx - hw, cy - hh, cx + hw, cy + hh};
  if (bounds) {
    out = clip(out, *bounds);
    if (!out.valid())
      throw GeometryError("enlarged box " + to_string(box) + " degenerates after clipping");
  }
  return out;
}

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double iogt(const Box& proposal, const Box& gt) {
  const double area = gt.area();
  if (area <= 0.0) return 0.0;
  return intersection_area(proposal, gt) / area;
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                             double iou_threshold) {
  if (boxes.size() != scores.size()) throw GeometryError("nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

std::size_t anchor_grid_count(int image_w, int image_h, const AnchorConfig& cfg) {
  const auto cols = static_cast<std::size_t>(std::ceil(image_w / cfg.stride));
  const auto rows = static_cast<std::size_t>(std::ceil(image_h / cfg.stride));
  return cols * rows * cfg.sizes.size() * cfg.ratios.size();
}

std::vector<Box> generate_anchors(int image_w, int image_h, const AnchorConfig& cfg) {
  if (image_w <= 0 || image_h <= 0) throw GeometryError("generate_anchors: image dims must be positive");
  cfg.validate();
  const int cols = static_cast<int>(std::ceil(image_w / cfg.stride));
  const int rows = static_cast<int>(std::ceil(image_h / cfg.stride));

  struct Shape {
    double half_w, half_h;
  };
  std::vector<Shape> shapes;
  shapes.reserve(cfg.sizes.size() * cfg.ratios.size());
  for (double s : cfg.sizes) {
    for (double r : cfg.ratios) {
      const double root = std::sqrt(r);
      shapes.push_back({0.5 * s / root, 0.5 * s * root});
    }
  }

  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(rows) * cols * shapes.size());
  for (int j = 0; j < rows; ++j) {
    const double cy = cfg.stride * (j + 0.5);
    for (int i = 0; i < cols; ++i) {
      const double cx = cfg.stride * (i + 0.5);
      for (const Shape& s : shapes) {
        const Box b = clip_to_image({cx - s.half_w, cy - s.half_h, cx + s.half_w, cy + s.half_h},
                                    image_w, image_h);
        if (b.valid()) anchors.push_back(b);
      }
    }
  }
  return anchors;
}

ResizeResult resize_keep_ratio(int width, int height, const ResizeSpec& spec) {
  if (width <= 0 || height <= 0) throw GeometryError("resize_keep_ratio: dims must be positive");
  spec.validate();
  const double long_edge = std::max(width, height);
  const double short_edge = std::min(width, height);
  const double scale = std::min(spec.max_long_edge / long_edge, spec.max_short_edge / short_edge);
  return {static_cast<int>(std::lround(width * scale)), static_cast<int>(std::lround(height * scale)),
          scale};
}

BoxDeltas encode_deltas(const Box& reference, const Box& target) {
  const double wp = reference.width();
  const double hp = reference.height();
  return {(target.center_x() - reference.center_x()) / wp,
          (target.center_y() - reference.center_y()) / hp, std::log(target.width() / wp),
          std::log(target.height() / hp)};
}

Box decode_deltas(const Box& reference, const BoxDeltas& d, double max_log_scale) {
  const double wp = reference.width();
  const double hp = reference.height();
  const double cx = reference.center_x() + d.dx * wp;
  const double cy = reference.center_y() + d.dy * hp;
  const double w = wp * std::exp(std::min(d.dw, max_log_scale));
  const double h = hp * std::exp(std::min(d.dh, max_log_scale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace ezsd
