#include "ezsd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ezsd {

using nlohmann::json;

void RunConfig::resolve() {
  namespace fs = std::filesystem;
  if (toy.out_dir.empty()) toy.out_dir = (fs::path(output_dir) / "toy").string();
  if (dataset.train_annotations.empty())
    dataset.train_annotations = (fs::path(toy.out_dir) / "train" / "annotations.json").string();
  if (dataset.eval_annotations.empty())
    dataset.eval_annotations = (fs::path(toy.out_dir) / "eval" / "annotations.json").string();
  if (dataset.split_config.empty())
    dataset.split_config = (fs::path(dataset.train_annotations).parent_path() / "split.json").string();
  if (const char* env = std::getenv(kEncoderCheckpointEnv); env && *env) encoder.checkpoint = env;
  adapt.seed = seed;
  proposals.seed = seed;
  detector.seed = seed;
  adapt.temperature = temperature;
  proposals.temperature = temperature;
  detector.temperature = temperature;
}

void RunConfig::validate() const {
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (eval.format != "csv" && eval.format != "json") throw ConfigError("eval.format must be csv or json");
  if (!(eval.iou_threshold > 0.0 && eval.iou_threshold <= 1.0)) throw ConfigError("eval.iou_threshold must be in (0, 1]");
  if (prompt_template.find("{name}") == std::string::npos)
    throw ConfigError("prompt_template must contain {name}");
  adapt.validate();
  proposals.validate();
  detector.validate();
}

namespace {

json split_json(const DatasetSplit& s) { return {{"base", s.base}, {"novel", s.novel}}; }

std::string dictionary_mode_name(DictionaryMode m) {
  return m == DictionaryMode::kAllCategories ? "all_categories" : "base_plus_listed_novel";
}

DictionaryMode parse_dictionary_mode(const std::string& s) {
  if (s == "all_categories") return DictionaryMode::kAllCategories;
  if (s == "base_plus_listed_novel") return DictionaryMode::kBasePlusListedNovel;
  throw ConfigError("unknown proposals.dictionary_mode '" + s + "'");
}

void check_known(const json& given, const json& reference, const std::string& where) {
  if (!given.is_object()) throw ConfigError((where.empty() ? "config" : where) + " must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (reference.at(key).is_object() && path != "toy.split") check_known(value, reference.at(key), path);
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  json det = to_json(c.detector);
  det.erase("temperature");
  det.erase("seed");
  const auto& t = c.toy.options;
  return {
      {"seed", c.seed},
      {"workers", c.workers},
      {"output_dir", c.output_dir},
      {"temperature", c.temperature},
      {"prompt_template", c.prompt_template},
      {"dataset",
       {{"train_annotations", c.dataset.train_annotations},
        {"eval_annotations", c.dataset.eval_annotations},
        {"split_config", c.dataset.split_config}}},
      {"toy",
       {{"seed", t.seed},
        {"n_images", t.n_images},
        {"n_eval_images", c.toy.n_eval_images},
        {"canvas_size", t.canvas_size},
        {"catalog", t.catalog},
        {"split", split_json(t.split)},
        {"min_objects", t.min_objects},
        {"max_objects", t.max_objects},
        {"min_size_frac", t.min_size_frac},
        {"max_size_frac", t.max_size_frac},
        {"first_image_id", t.first_image_id},
        {"out_dir", c.toy.out_dir}}},
      {"encoder",
       {{"kind", c.encoder.kind},
        {"seed", c.encoder.seed},
        {"dim", c.encoder.dim},
        {"input_side", c.encoder.input_side},
        {"checkpoint", c.encoder.checkpoint},
        {"plugin", c.encoder.plugin}}},
      {"adapt",
       {{"learning_rate", c.adapt.learning_rate},
        {"batch_size", c.adapt.batch_size},
        {"epochs", c.adapt.epochs},
        {"grad_norm_clip", c.adapt.grad_norm_clip},
        {"enlarge_factor", c.adapt.enlarge_factor},
        {"weight_decay", c.adapt.weight_decay}}},
      {"proposals",
       {{"anchors",
         {{"stride", c.proposals.anchors.stride},
          {"sizes", c.proposals.anchors.sizes},
          {"ratios", c.proposals.anchors.ratios}}},
        {"resize",
         {{"max_long_edge", c.proposals.resize.max_long_edge}, {"max_short_edge", c.proposals.resize.max_short_edge}}},
        {"nms_iou", c.proposals.nms_iou},
        {"top_k", c.proposals.top_k},
        {"base_gt_filter_iou", c.proposals.base_gt_filter_iou},
        {"gt_enlarge_factor", c.proposals.gt_enlarge_factor},
        {"train_subset_size", c.proposals.train_subset_size},
        {"dictionary_mode", dictionary_mode_name(c.proposals.dictionary_mode)},
        {"listed_novel", c.proposals.listed_novel}}},
      {"detector", det},
      {"eval", {{"iou_threshold", c.eval.iou_threshold}, {"format", c.eval.format}}},
  };
}

void update_from_json(RunConfig& c, const json& j) {
  check_known(j, to_json(c), "");
  json m = to_json(c);
  m.merge_patch(j);
  try {
    c.seed = m.at("seed").get<std::uint64_t>();
    c.workers = m.at("workers").get<int>();
    c.output_dir = m.at("output_dir").get<std::string>();
    c.temperature = m.at("temperature").get<double>();
    c.prompt_template = m.at("prompt_template").get<std::string>();

    const auto& d = m.at("dataset");
    c.dataset.train_annotations = d.at("train_annotations").get<std::string>();
    c.dataset.eval_annotations = d.at("eval_annotations").get<std::string>();
    c.dataset.split_config = d.at("split_config").get<std::string>();

    const auto& t = m.at("toy");
    auto& o = c.toy.options;
    o.seed = t.at("seed").get<std::uint64_t>();
    o.n_images = t.at("n_images").get<int>();
    c.toy.n_eval_images = t.at("n_eval_images").get<int>();
    o.canvas_size = t.at("canvas_size").get<int>();
    o.catalog = t.at("catalog").get<std::vector<std::string>>();
    check_known(t.at("split"), {{"base", 0}, {"novel", 0}}, "toy.split");
    o.split.base = t.at("split").at("base").get<std::vector<std::string>>();
    o.split.novel = t.at("split").at("novel").get<std::vector<std::string>>();
    o.min_objects = t.at("min_objects").get<int>();
    o.max_objects = t.at("max_objects").get<int>();
    o.min_size_frac = t.at("min_size_frac").get<double>();
    o.max_size_frac = t.at("max_size_frac").get<double>();
    o.first_image_id = t.at("first_image_id").get<std::int64_t>();
    c.toy.out_dir = t.at("out_dir").get<std::string>();

    const auto& e = m.at("encoder");
    c.encoder.kind = e.at("kind").get<std::string>();
    c.encoder.seed = e.at("seed").get<std::uint64_t>();
    c.encoder.dim = e.at("dim").get<int>();
    c.encoder.input_side = e.at("input_side").get<int>();
    c.encoder.checkpoint = e.at("checkpoint").get<std::string>();
    c.encoder.plugin = e.at("plugin").get<std::string>();

    const auto& a = m.at("adapt");
    c.adapt.learning_rate = a.at("learning_rate").get<double>();
    c.adapt.batch_size = a.at("batch_size").get<int>();
    c.adapt.epochs = a.at("epochs").get<int>();
    c.adapt.grad_norm_clip = a.at("grad_norm_clip").get<double>();
    c.adapt.enlarge_factor = a.at("enlarge_factor").get<double>();
    c.adapt.weight_decay = a.at("weight_decay").get<double>();

    const auto& p = m.at("proposals");
    c.proposals.anchors.stride = p.at("anchors").at("stride").get<double>();
    c.proposals.anchors.sizes = p.at("anchors").at("sizes").get<std::vector<double>>();
    c.proposals.anchors.ratios = p.at("anchors").at("ratios").get<std::vector<double>>();
    c.proposals.resize.max_long_edge = p.at("resize").at("max_long_edge").get<int>();
    c.proposals.resize.max_short_edge = p.at("resize").at("max_short_edge").get<int>();
    c.proposals.nms_iou = p.at("nms_iou").get<double>();
    c.proposals.top_k = p.at("top_k").get<std::size_t>();
    c.proposals.base_gt_filter_iou = p.at("base_gt_filter_iou").get<double>();
    c.proposals.gt_enlarge_factor = p.at("gt_enlarge_factor").get<double>();
    c.proposals.train_subset_size = p.at("train_subset_size").get<std::size_t>();
    c.proposals.dictionary_mode = parse_dictionary_mode(p.at("dictionary_mode").get<std::string>());
    c.proposals.listed_novel = p.at("listed_novel").get<std::vector<std::string>>();

    update_from_json(c.detector, m.at("detector"));

    c.eval.iou_threshold = m.at("eval").at("iou_threshold").get<double>();
    c.eval.format = m.at("eval").at("format").get<std::string>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("invalid config value: ") + ex.what());
  } catch (const DetectorError& ex) {
    throw ConfigError(ex.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& ex) {
    throw ConfigError("malformed config file " + path.string() + ": " + ex.what());
  }
  RunConfig cfg;
  update_from_json(cfg, j);
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  update_from_json(cfg, patch);
}

}  // namespace ezsd
