#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ezsd {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Axis-aligned box in pixel coordinates, corner convention.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return valid() ? width() * height() : 0.0; }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

std::string to_string(const Box& box);

struct AnchorConfig {
  double stride = 32.0;
  std::vector<double> sizes = {32.0, 64.0, 128.0, 256.0, 512.0};
  // Aspect values r = h / w.
  std::vector<double> ratios = {1.0, 2.0, 0.5};

  void validate() const;
};

struct ResizeSpec {
  int max_long_edge = 1333;
  int max_short_edge = 800;

  void validate() const;
};

struct ResizeResult {
  int width = 0;
  int height = 0;
  double scale = 1.0;
};

// Scales width and height by `factor` about the center. When `bounds` is
// given the result is clipped to it; a clipped result with zero area throws.
Box enlarge(const Box& box, double factor, const std::optional<Box>& bounds = std::nullopt);

Box clip(const Box& box, const Box& bounds);
Box clip_to_image(const Box& box, double width, double height);

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);
// Intersection over the area of `gt`.
double iogt(const Box& proposal, const Box& gt);

// Greedy suppression by descending score. Equal scores resolve to the lower
// input index. Returned indices are in selection order.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                             double iou_threshold);

// Number of grid anchors before degenerate clipped boxes are dropped.
std::size_t anchor_grid_count(int image_w, int image_h, const AnchorConfig& cfg);

// Anchors ordered row-major over grid cells, then by size, then by ratio.
// Boxes are clipped to the image; anchors whose clipped area is zero are dropped.
std::vector<Box> generate_anchors(int image_w, int image_h, const AnchorConfig& cfg);

ResizeResult resize_keep_ratio(int width, int height, const ResizeSpec& spec = {});

// Box regression deltas relative to a reference box:
// dx = (xg - xp) / wp, dy = (yg - yp) / hp, dw = ln(wg / wp), dh = ln(hg / hp).
struct BoxDeltas {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;
};

BoxDeltas encode_deltas(const Box& reference, const Box& target);
// `max_log_scale` bounds dw/dh before exponentiation.
Box decode_deltas(const Box& reference, const BoxDeltas& deltas, double max_log_scale = 4.135);

}  // namespace ezsd
