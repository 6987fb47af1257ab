#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ezsd/geometry.hpp"
#include "ezsd/image.hpp"

namespace ezsd {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SizeBin { kSmall, kMedium, kLarge };

// COCO convention: small < 32^2, medium < 96^2, large otherwise.
SizeBin size_bin_for_area(double area);
std::string_view to_string(SizeBin bin);

enum class CategoryRole { kBase, kNovel };
std::string_view to_string(CategoryRole role);

struct Category {
  int id = 0;
  std::string name;
};

struct Annotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  int category_id = 0;
  Box box;
  SizeBin size_bin = SizeBin::kSmall;
};

struct ImageRecord {
  std::int64_t id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;                 // relative to the dataset image root
  std::shared_ptr<const Image> pixels;   // embedded pixels take precedence over file_name
};

// Base/novel partition of category names; order defines per-side indices.
struct DatasetSplit {
  std::vector<std::string> base;
  std::vector<std::string> novel;

  std::optional<CategoryRole> role_of(std::string_view name) const;
  std::optional<int> base_index(std::string_view name) const;
  std::optional<int> novel_index(std::string_view name) const;
  // Base names followed by novel names.
  std::vector<std::string> all() const;
  void validate() const;
};

DatasetSplit read_split_config(const std::filesystem::path& path);
void write_split_config(const std::filesystem::path& path, const DatasetSplit& split);

struct Dataset {
  std::filesystem::path image_root;
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  std::vector<Category> categories;  // categories named by the split only
  DatasetSplit split;

  const Category& category(int id) const;
  CategoryRole role(int category_id) const;
  const std::string& category_name(int category_id) const;
  const ImageRecord& image(std::int64_t image_id) const;
  // Indices into `annotations` for one image, in file order.
  const std::vector<std::size_t>& annotations_of(std::int64_t image_id) const;
  Image load_image(const ImageRecord& record) const;

  // Rebuilds lookup tables; call after mutating images/annotations/categories.
  void reindex();

 private:
  std::map<int, std::size_t> category_index_;
  std::map<std::int64_t, std::size_t> image_index_;
  std::map<std::int64_t, std::vector<std::size_t>> by_image_;
};

// Parses a detection-annotation JSON file (images, annotations, categories).
// Boxes are converted from (x, y, w, h) to corners. Categories in the file but
// not named by `split` are dropped together with their annotations.
Dataset load_coco_json(const std::filesystem::path& path, const DatasetSplit& split);
void write_coco_json(const std::filesystem::path& path, const Dataset& dataset);

// Keeps images with at least one base annotation; with `keep_novel_only` set
// (validation mode) images with any base or novel annotation are kept.
std::vector<ImageRecord> filter_training_images(const std::vector<ImageRecord>& records,
                                                const Dataset& dataset, bool keep_novel_only = false);

// ---- Toy data -------------------------------------------------------------

enum class ShapeKind { kSquare, kCircle, kTriangle };

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;  // [0, 1]
};

struct ToyCategory {
  std::string name;
  ShapeKind kind = ShapeKind::kSquare;
  Rgb color;
};

// Category names are "<color>_<shape>", e.g. "red_square".
std::optional<Rgb> toy_color(std::string_view word);
std::optional<ShapeKind> toy_shape(std::string_view word);
const std::vector<std::pair<std::string, Rgb>>& toy_color_table();
std::optional<ToyCategory> parse_toy_category(std::string_view name);

// True when pixel center (px + 0.5, py + 0.5) falls inside the shape's box.
bool shape_covers(ShapeKind kind, const Box& box, double px, double py);

struct ToyOptions {
  std::uint64_t seed = 7;
  int n_images = 10;
  int canvas_size = 128;
  std::vector<std::string> catalog = {"red_square", "green_circle", "blue_triangle", "yellow_circle",
                                      "magenta_square"};
  DatasetSplit split{{"red_square", "green_circle", "blue_triangle"}, {"yellow_circle", "magenta_square"}};
  int min_objects = 1;
  int max_objects = 3;
  double min_size_frac = 0.16;
  double max_size_frac = 0.40;
  std::int64_t first_image_id = 1;
};

// Writes <out_dir>/annotations.json, <out_dir>/split.json and
// <out_dir>/images/*.ppm; returns the dataset as loaded from disk.
Dataset make_toy_dataset(const std::filesystem::path& out_dir, const ToyOptions& options);

// Renders one prototype instance of `category` centered on a flat gray canvas.
Image render_prototype(const ToyCategory& category, int canvas, int shape_side);

}  // namespace ezsd
