#include "ezsd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

namespace ezsd {

using nlohmann::json;

SizeBin size_bin_for_area(double area) {
  if (area < 32.0 * 32.0) return SizeBin::kSmall;
  if (area < 96.0 * 96.0) return SizeBin::kMedium;
  return SizeBin::kLarge;
}

std::string_view to_string(SizeBin bin) {
  switch (bin) {
    case SizeBin::kSmall: return "S";
    case SizeBin::kMedium: return "M";
    case SizeBin::kLarge: return "L";
  }
  return "?";
}

std::string_view to_string(CategoryRole role) { return role == CategoryRole::kBase ? "base" : "novel"; }

// ---- DatasetSplit ---------------------------------------------------------

namespace {
std::optional<int> index_in(const std::vector<std::string>& names, std::string_view name) {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<int>(it - names.begin());
}
}  // namespace

std::optional<CategoryRole> DatasetSplit::role_of(std::string_view name) const {
  if (base_index(name)) return CategoryRole::kBase;
  if (novel_index(name)) return CategoryRole::kNovel;
  return std::nullopt;
}

std::optional<int> DatasetSplit::base_index(std::string_view name) const { return index_in(base, name); }
std::optional<int> DatasetSplit::novel_index(std::string_view name) const { return index_in(novel, name); }

std::vector<std::string> DatasetSplit::all() const {
  std::vector<std::string> out = base;
  out.insert(out.end(), novel.begin(), novel.end());
  return out;
}

void DatasetSplit::validate() const {
  std::set<std::string> seen;
  for (const auto& n : all()) {
    if (n.empty()) throw DatasetError("split contains an empty category name");
    if (!seen.insert(n).second) throw DatasetError("category '" + n + "' listed twice in split");
  }
}

DatasetSplit read_split_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open split config: " + path.string());
  DatasetSplit split;
  try {
    const json j = json::parse(in);
    split.base = j.at("base").get<std::vector<std::string>>();
    split.novel = j.value("novel", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw DatasetError("malformed split config " + path.string() + ": " + e.what());
  }
  split.validate();
  return split;
}

void write_split_config(const std::filesystem::path& path, const DatasetSplit& split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DatasetError("cannot write split config: " + path.string());
  out << json{{"base", split.base}, {"novel", split.novel}}.dump(2) << "\n";
}

// ---- Dataset --------------------------------------------------------------

void Dataset::reindex() {
  category_index_.clear();
  image_index_.clear();
  by_image_.clear();
  for (std::size_t i = 0; i < categories.size(); ++i) category_index_[categories[i].id] = i;
  for (std::size_t i = 0; i < images.size(); ++i) {
    image_index_[images[i].id] = i;
    by_image_[images[i].id];
  }
  for (std::size_t i = 0; i < annotations.size(); ++i) by_image_[annotations[i].image_id].push_back(i);
}

const Category& Dataset::category(int id) const {
  const auto it = category_index_.find(id);
  if (it == category_index_.end()) throw DatasetError("unknown category id " + std::to_string(id));
  return categories[it->second];
}

CategoryRole Dataset::role(int category_id) const {
  const auto r = split.role_of(category(category_id).name);
  if (!r) throw DatasetError("category " + std::to_string(category_id) + " is outside the split");
  return *r;
}

const std::string& Dataset::category_name(int category_id) const { return category(category_id).name; }

const ImageRecord& Dataset::image(std::int64_t image_id) const {
  const auto it = image_index_.find(image_id);
  if (it == image_index_.end()) throw DatasetError("unknown image id " + std::to_string(image_id));
  return images[it->second];
}

const std::vector<std::size_t>& Dataset::annotations_of(std::int64_t image_id) const {
  static const std::vector<std::size_t> kEmpty;
  const auto it = by_image_.find(image_id);
  return it == by_image_.end() ? kEmpty : it->second;
}

Image Dataset::load_image(const ImageRecord& record) const {
  if (record.pixels) return *record.pixels;
  Image img = read_ppm(image_root / record.file_name);
  if (img.width != record.width || img.height != record.height)
    throw DatasetError("image " + record.file_name + " size differs from its record");
  return img;
}

Dataset load_coco_json(const std::filesystem::path& path, const DatasetSplit& split) {
  split.validate();
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open annotation file: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetError("malformed annotation JSON " + path.string() + ": " + e.what());
  }

  Dataset ds;
  ds.image_root = path.parent_path();
  ds.split = split;
  try {
    std::map<int, std::string> all_categories;
    for (const auto& c : j.at("categories")) all_categories[c.at("id").get<int>()] = c.at("name").get<std::string>();

    std::set<std::string> known_names;
    for (const auto& [id, name] : all_categories) known_names.insert(name);
    for (const auto& name : split.all())
      if (!known_names.count(name))
        throw DatasetError("split names category '" + name + "' which is absent from " + path.string());

    for (const auto& [id, name] : all_categories)
      if (split.role_of(name)) ds.categories.push_back({id, name});

    for (const auto& im : j.at("images")) {
      ImageRecord r;
      r.id = im.at("id").get<std::int64_t>();
      r.width = im.at("width").get<int>();
      r.height = im.at("height").get<int>();
      r.file_name = im.value("file_name", std::string{});
      if (r.width <= 0 || r.height <= 0) throw DatasetError("image " + std::to_string(r.id) + " has non-positive size");
      ds.images.push_back(std::move(r));
    }
    std::map<std::int64_t, std::pair<int, int>> dims;
    for (const auto& r : ds.images) dims[r.id] = {r.width, r.height};

    for (const auto& a : j.at("annotations")) {
      const int cat = a.at("category_id").get<int>();
      if (!all_categories.count(cat))
        throw DatasetError("annotation references category " + std::to_string(cat) + " absent from categories");
      if (!split.role_of(all_categories[cat])) continue;
      Annotation ann;
      ann.id = a.value("id", std::int64_t{0});
      ann.image_id = a.at("image_id").get<std::int64_t>();
      ann.category_id = cat;
      const auto bbox = a.at("bbox").get<std::vector<double>>();
      if (bbox.size() != 4) throw DatasetError("annotation bbox must have 4 entries");
      ann.box = {bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
      const auto d = dims.find(ann.image_id);
      if (d == dims.end()) throw DatasetError("annotation references unknown image " + std::to_string(ann.image_id));
      ann.box = clip_to_image(ann.box, d->second.first, d->second.second);
      if (!ann.box.valid()) continue;  // zero-area boxes carry no instance
      ann.size_bin = size_bin_for_area(ann.box.area());
      ds.annotations.push_back(ann);
    }
  } catch (const json::exception& e) {
    throw DatasetError("annotation schema error in " + path.string() + ": " + e.what());
  }
  ds.reindex();
  return ds;
}

void write_coco_json(const std::filesystem::path& path, const Dataset& dataset) {
  json images = json::array();
  for (const auto& r : dataset.images)
    images.push_back({{"id", r.id}, {"width", r.width}, {"height", r.height}, {"file_name", r.file_name}});
  json anns = json::array();
  for (const auto& a : dataset.annotations) {
    anns.push_back({{"id", a.id},
                    {"image_id", a.image_id},
                    {"category_id", a.category_id},
                    {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
                    {"area", a.box.area()},
                    {"iscrowd", 0}});
  }
  json cats = json::array();
  for (const auto& c : dataset.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DatasetError("cannot write annotation file: " + path.string());
  out << json{{"images", images}, {"annotations", anns}, {"categories", cats}}.dump() << "\n";
}

std::vector<ImageRecord> filter_training_images(const std::vector<ImageRecord>& records,
                                                const Dataset& dataset, bool keep_novel_only) {
  std::vector<ImageRecord> kept;
  for (const auto& r : records) {
    bool keep = false;
    for (std::size_t ai : dataset.annotations_of(r.id)) {
      const auto role = dataset.role(dataset.annotations[ai].category_id);
      if (role == CategoryRole::kBase || keep_novel_only) {
        keep = true;
        break;
      }
    }
    if (keep) kept.push_back(r);
  }
  return kept;
}

// ---- Toy data -------------------------------------------------------------

const std::vector<std::pair<std::string, Rgb>>& toy_color_table() {
  static const std::vector<std::pair<std::string, Rgb>> table = {
      {"red", {0.86, 0.14, 0.14}},    {"green", {0.14, 0.74, 0.20}}, {"blue", {0.16, 0.24, 0.86}},
      {"yellow", {0.90, 0.84, 0.14}}, {"cyan", {0.14, 0.80, 0.84}},  {"magenta", {0.82, 0.18, 0.80}},
      {"orange", {0.94, 0.52, 0.10}}, {"white", {0.96, 0.96, 0.96}},
  };
  return table;
}

std::optional<Rgb> toy_color(std::string_view word) {
  for (const auto& [name, rgb] : toy_color_table())
    if (name == word) return rgb;
  return std::nullopt;
}

std::optional<ShapeKind> toy_shape(std::string_view word) {
  if (word == "square") return ShapeKind::kSquare;
  if (word == "circle") return ShapeKind::kCircle;
  if (word == "triangle") return ShapeKind::kTriangle;
  return std::nullopt;
}

std::optional<ToyCategory> parse_toy_category(std::string_view name) {
  const auto sep = name.find('_');
  if (sep == std::string_view::npos) return std::nullopt;
  const auto color = toy_color(name.substr(0, sep));
  const auto shape = toy_shape(name.substr(sep + 1));
  if (!color || !shape) return std::nullopt;
  return ToyCategory{std::string(name), *shape, *color};
}

bool shape_covers(ShapeKind kind, const Box& box, double px, double py) {
  if (px < box.x1 || px >= box.x2 || py < box.y1 || py >= box.y2) return false;
  const double u = (px - box.x1) / box.width();   // [0, 1)
  const double v = (py - box.y1) / box.height();
  switch (kind) {
    case ShapeKind::kSquare: return true;
    case ShapeKind::kCircle: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeKind::kTriangle: return std::abs(u - 0.5) <= 0.5 * v;  // apex up
  }
  return false;
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

class ToyPainter {
 public:
  explicit ToyPainter(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

  void background(Image& img) {
    const double base = uniform(0.42, 0.58);
    const double fx = uniform(0.05, 0.25), fy = uniform(0.05, 0.25);
    const double phase = uniform(0.0, 6.283);
    const double tint[3] = {uniform(-0.02, 0.02), uniform(-0.02, 0.02), uniform(-0.02, 0.02)};
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const double wave = 0.04 * std::sin(fx * x + fy * y + phase);
        const double noise = uniform(-0.05, 0.05);
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = to_byte(base + wave + noise + tint[c]);
      }
    }
  }

  void shape(Image& img, const ToyCategory& cat, const Box& box) {
    const double jitter[3] = {uniform(-0.04, 0.04), uniform(-0.04, 0.04), uniform(-0.04, 0.04)};
    const double rgb[3] = {cat.color.r, cat.color.g, cat.color.b};
    const int x0 = std::max(0, static_cast<int>(box.x1));
    const int y0 = std::max(0, static_cast<int>(box.y1));
    const int x1 = std::min(img.width, static_cast<int>(std::ceil(box.x2)));
    const int y1 = std::min(img.height, static_cast<int>(std::ceil(box.y2)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        if (!shape_covers(cat.kind, box, x + 0.5, y + 0.5)) continue;
        const double noise = uniform(-0.03, 0.03);
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = to_byte(rgb[c] + jitter[c] + noise);
      }
    }
  }

 private:
  std::mt19937_64 rng_;
};

std::string image_file_name(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "images/%06lld.ppm", static_cast<long long>(id));
  return buf;
}

}  // namespace

Image render_prototype(const ToyCategory& category, int canvas, int shape_side) {
  Image img(canvas, canvas);
  std::fill(img.rgb.begin(), img.rgb.end(), to_byte(0.5));
  const double off = 0.5 * (canvas - shape_side);
  const Box box{off, off, off + shape_side, off + shape_side};
  const std::uint8_t rgb[3] = {to_byte(category.color.r), to_byte(category.color.g), to_byte(category.color.b)};
  for (int y = 0; y < canvas; ++y)
    for (int x = 0; x < canvas; ++x)
      if (shape_covers(category.kind, box, x + 0.5, y + 0.5))
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[c];
  return img;
}

Dataset make_toy_dataset(const std::filesystem::path& out_dir, const ToyOptions& options) {
  options.split.validate();
  if (options.n_images < 0) throw DatasetError("n_images must be non-negative");
  if (options.catalog.empty()) throw DatasetError("toy catalog is empty");
  if (options.min_objects < 0 || options.max_objects < options.min_objects)
    throw DatasetError("invalid object count range");
  if (!(options.min_size_frac > 0.0) || options.max_size_frac < options.min_size_frac || options.max_size_frac > 1.0)
    throw DatasetError("invalid shape size range");
  const int min_side = static_cast<int>(std::floor(options.min_size_frac * options.canvas_size));
  if (options.canvas_size <= 0 || min_side < 8)
    throw DatasetError("canvas of " + std::to_string(options.canvas_size) + " px is too small to place shapes");

  std::vector<ToyCategory> cats;
  for (const auto& name : options.catalog) {
    auto c = parse_toy_category(name);
    if (!c) throw DatasetError("toy catalog entry '" + name + "' is not <color>_<shape>");
    cats.push_back(*c);
  }
  for (const auto& name : options.split.all())
    if (std::find(options.catalog.begin(), options.catalog.end(), name) == options.catalog.end())
      throw DatasetError("split names '" + name + "' which is not in the toy catalog");

  std::filesystem::create_directories(out_dir / "images");
  Dataset ds;
  ds.image_root = out_dir;
  ds.split = options.split;
  for (std::size_t i = 0; i < cats.size(); ++i) ds.categories.push_back({static_cast<int>(i) + 1, cats[i].name});

  ToyPainter painter(options.seed);
  const int canvas = options.canvas_size;
  const int max_side = std::max(min_side, static_cast<int>(std::floor(options.max_size_frac * canvas)));
  std::int64_t ann_id = 1;
  for (int n = 0; n < options.n_images; ++n) {
    const std::int64_t image_id = options.first_image_id + n;
    Image img(canvas, canvas);
    painter.background(img);
    std::vector<Box> placed;
    const int count = painter.uniform_int(options.min_objects, options.max_objects);
    for (int k = 0; k < count; ++k) {
      const int cat = painter.uniform_int(0, static_cast<int>(cats.size()) - 1);
      const int side = painter.uniform_int(min_side, max_side);
      for (int attempt = 0; attempt < 50; ++attempt) {
        const double x = painter.uniform_int(0, canvas - side);
        const double y = painter.uniform_int(0, canvas - side);
        const Box box{x, y, x + side, y + side};
        const Box margin{x - 2, y - 2, x + side + 2, y + side + 2};
        if (std::any_of(placed.begin(), placed.end(),
                        [&](const Box& p) { return intersection_area(p, margin) > 0.0; }))
          continue;
        painter.shape(img, cats[cat], box);
        placed.push_back(box);
        if (options.split.role_of(cats[cat].name)) {
          ds.annotations.push_back(
              {ann_id++, image_id, static_cast<int>(cat) + 1, box, size_bin_for_area(box.area())});
        }
        break;
      }
    }
    ImageRecord rec{image_id, canvas, canvas, image_file_name(image_id), nullptr};
    write_ppm(out_dir / rec.file_name, img);
    ds.images.push_back(std::move(rec));
  }
  ds.reindex();
  write_coco_json(out_dir / "annotations.json", ds);
  write_split_config(out_dir / "split.json", options.split);
  return load_coco_json(out_dir / "annotations.json", options.split);
}

}  // namespace ezsd
