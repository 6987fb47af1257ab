#include "ezsd/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace ezsd {

const CategoryAp* EvalResult::find(const std::string& name) const {
  for (const auto& c : per_category)
    if (c.name == name) return &c;
  return nullptr;
}

namespace {

double average_precision(const std::vector<const Detection*>& dets,
                         const std::map<std::int64_t, std::vector<Box>>& gt_by_image, std::size_t num_gt,
                         double iou_threshold) {
  if (num_gt == 0) return 0.0;
  std::vector<const Detection*> ranked = dets;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Detection* a, const Detection* b) { return a->score > b->score; });

  std::map<std::int64_t, std::vector<char>> matched;
  for (const auto& [img, boxes] : gt_by_image) matched[img].assign(boxes.size(), 0);

  std::vector<double> recall, precision;
  recall.reserve(ranked.size());
  precision.reserve(ranked.size());
  std::size_t tp = 0, fp = 0;
  for (const Detection* d : ranked) {
    int best = -1;
    double best_iou = iou_threshold;
    const auto it = gt_by_image.find(d->image_id);
    if (it != gt_by_image.end()) {
      auto& used = matched[d->image_id];
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (used[g]) continue;
        const double o = iou(d->box, it->second[g]);
        if (o >= best_iou) {
          best_iou = o;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) used[best] = 1;
    }
    if (best >= 0)
      ++tp;
    else
      ++fp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double sum = 0.0;
  for (int t = 0; t <= 100; ++t) {
    const double r = t / 100.0;
    const auto pos = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (pos != recall.end()) sum += precision[static_cast<std::size_t>(pos - recall.begin())];
  }
  return sum / 101.0;
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EvalResult evaluate_detections(const std::vector<Detection>& detections, const Dataset& gt, double iou_threshold) {
  EvalResult result;
  result.iou_threshold = iou_threshold;
  std::vector<double> base, novel, all;
  for (const auto& cat : gt.categories) {
    std::map<std::int64_t, std::vector<Box>> gt_by_image;
    std::size_t num_gt = 0;
    for (const auto& a : gt.annotations) {
      if (a.category_id != cat.id) continue;
      gt_by_image[a.image_id].push_back(a.box);
      ++num_gt;
    }
    if (num_gt == 0) continue;
    std::vector<const Detection*> dets;
    for (const auto& d : detections)
      if (d.category_id == cat.id) dets.push_back(&d);
    CategoryAp entry{cat.id, cat.name, gt.role(cat.id), num_gt,
                     average_precision(dets, gt_by_image, num_gt, iou_threshold)};
    (entry.role == CategoryRole::kBase ? base : novel).push_back(entry.ap);
    all.push_back(entry.ap);
    result.per_category.push_back(std::move(entry));
  }
  result.base = mean_of(base);
  result.novel = mean_of(novel);
  result.overall = mean_of(all);
  return result;
}

IoGtReport iogt_statistics(const ProposalStore& store, const std::vector<Annotation>& novel_gt) {
  IoGtReport report;
  std::map<std::int64_t, std::vector<Box>> gt_by_image;
  for (const auto& a : novel_gt) gt_by_image[a.image_id].push_back(a.box);
  report.num_novel_gt = novel_gt.size();

  std::map<std::int64_t, const ImageProposals*> by_image;
  for (const auto& ip : store.images) {
    by_image[ip.image_id] = &ip;
    report.total_proposals += ip.proposals.size();
  }

  if (!novel_gt.empty()) {
    double sum = 0.0;
    for (const auto& a : novel_gt) {
      double best = 0.0;
      const auto it = by_image.find(a.image_id);
      if (it != by_image.end())
        for (const auto& p : it->second->proposals) best = std::max(best, iogt(p.box, a.box));
      sum += best;
    }
    report.mean_iogt = sum / static_cast<double>(novel_gt.size());
  }

  for (const auto& ip : store.images) {
    const auto it = gt_by_image.find(ip.image_id);
    if (it == gt_by_image.end()) continue;
    for (const auto& p : ip.proposals) {
      double best = 0.0;
      for (const Box& g : it->second) best = std::max(best, iogt(p.box, g));
      if (best >= 0.8) ++report.count_ge_080;
      if (best >= 0.5) ++report.count_ge_050;
    }
  }
  if (report.total_proposals > 0) {
    report.frac_ge_080 = static_cast<double>(report.count_ge_080) / static_cast<double>(report.total_proposals);
    report.frac_ge_050 = static_cast<double>(report.count_ge_050) / static_cast<double>(report.total_proposals);
  }
  return report;
}

std::vector<Annotation> novel_annotations(const Dataset& dataset) {
  std::vector<Annotation> out;
  for (const auto& a : dataset.annotations)
    if (dataset.role(a.category_id) == CategoryRole::kNovel) out.push_back(a);
  return out;
}

std::vector<EvalRow> eval_rows(const EvalResult& result) {
  std::vector<EvalRow> rows;
  for (const auto& c : result.per_category) rows.push_back({c.name, std::string(to_string(c.role)), c.ap});
  if (result.base) rows.push_back({"base", "aggregate", *result.base});
  if (result.novel) rows.push_back({"novel", "aggregate", *result.novel});
  if (result.overall) rows.push_back({"overall", "aggregate", *result.overall});
  return rows;
}

std::vector<MetricRow> iogt_rows(const IoGtReport& r) {
  return {
      {"mean_iogt", r.mean_iogt},
      {"num_novel_gt", static_cast<double>(r.num_novel_gt)},
      {"total_proposals", static_cast<double>(r.total_proposals)},
      {"count_iogt_ge_0.8", static_cast<double>(r.count_ge_080)},
      {"count_iogt_ge_0.5", static_cast<double>(r.count_ge_050)},
      {"frac_iogt_ge_0.8", r.frac_ge_080},
      {"frac_iogt_ge_0.5", r.frac_ge_050},
  };
}

namespace {

std::ofstream open_report(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report: " + path.string());
  std::string line;
  std::getline(in, line);  // header
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != columns) throw std::runtime_error("malformed report row: " + line);
    rows.push_back(std::move(fields));
  }
  return rows;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report: " + path.string());
  return nlohmann::json::parse(in);
}

}  // namespace

void emit_report(const std::filesystem::path& path, const std::vector<EvalRow>& rows, ReportFormat format) {
  auto out = open_report(path);
  if (format == ReportFormat::kCsv) {
    out << "category,role,AP\n" << std::fixed << std::setprecision(6);
    for (const auto& r : rows) out << r.category << "," << r.role << "," << r.ap << "\n";
  } else {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) j.push_back({{"category", r.category}, {"role", r.role}, {"AP", r.ap}});
    out << nlohmann::json{{"rows", j}}.dump(2) << "\n";
  }
  if (!out) throw std::runtime_error("failed writing report: " + path.string());
}

void emit_report(const std::filesystem::path& path, const std::vector<MetricRow>& rows, ReportFormat format) {
  auto out = open_report(path);
  if (format == ReportFormat::kCsv) {
    out << "metric,value\n" << std::fixed << std::setprecision(6);
    for (const auto& r : rows) {
      out << r.metric << ",";
      if (r.value && *r.value == std::floor(*r.value) && std::abs(*r.value) < 1e15)
        out << static_cast<long long>(*r.value);
      else if (r.value)
        out << *r.value;
      out << "\n";
    }
  } else {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) j.push_back({{"metric", r.metric}, {"value", r.value ? nlohmann::json(*r.value) : nullptr}});
    out << nlohmann::json{{"rows", j}, {"multi_gt_proposals", "counted once at max IoGT"}}.dump(2) << "\n";
  }
  if (!out) throw std::runtime_error("failed writing report: " + path.string());
}

std::vector<EvalRow> read_eval_report(const std::filesystem::path& path, ReportFormat format) {
  std::vector<EvalRow> rows;
  if (format == ReportFormat::kCsv) {
    for (auto& f : read_csv(path, 3)) rows.push_back({f[0], f[1], std::stod(f[2])});
  } else {
    const nlohmann::json doc = read_json(path);
    for (const auto& r : doc.at("rows"))
      rows.push_back({r.at("category").get<std::string>(), r.at("role").get<std::string>(), r.at("AP").get<double>()});
  }
  return rows;
}

std::vector<MetricRow> read_metric_report(const std::filesystem::path& path, ReportFormat format) {
  std::vector<MetricRow> rows;
  if (format == ReportFormat::kCsv) {
    for (auto& f : read_csv(path, 2))
      rows.push_back({f[0], f[1].empty() ? std::nullopt : std::optional<double>(std::stod(f[1]))});
  } else {
    const nlohmann::json doc = read_json(path);
    for (const auto& r : doc.at("rows")) {
      const auto& v = r.at("value");
      rows.push_back({r.at("metric").get<std::string>(), v.is_null() ? std::nullopt : std::optional<double>(v.get<double>())});
    }
  }
  return rows;
}

}  // namespace ezsd
