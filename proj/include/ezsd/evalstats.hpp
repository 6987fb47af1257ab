#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ezsd/dataset.hpp"
#include "ezsd/geometry.hpp"
#include "ezsd/proposals.hpp"

namespace ezsd {

struct Detection {
  std::int64_t image_id = 0;
  int category_id = 0;
  Box box;
  double score = 0.0;
};

struct CategoryAp {
  int category_id = 0;
  std::string name;
  CategoryRole role = CategoryRole::kBase;
  std::size_t num_gt = 0;
  double ap = 0.0;
};

struct EvalResult {
  double iou_threshold = 0.5;
  std::vector<CategoryAp> per_category;  // categories with at least one GT instance
  std::optional<double> base;
  std::optional<double> novel;
  std::optional<double> overall;

  const CategoryAp* find(const std::string& name) const;
};

// 101-point interpolated AP per category. Detections are ranked by descending
// score (ties keep input order) and greedily matched to the highest-IoU
// unmatched GT of the same image and category.
EvalResult evaluate_detections(const std::vector<Detection>& detections, const Dataset& gt,
                               double iou_threshold = 0.5);

struct IoGtReport {
  std::optional<double> mean_iogt;  // absent without novel GT
  std::size_t num_novel_gt = 0;
  std::size_t total_proposals = 0;
  std::size_t count_ge_080 = 0;
  std::size_t count_ge_050 = 0;
  double frac_ge_080 = 0.0;
  double frac_ge_050 = 0.0;
};

// Mean: every novel GT contributes its best proposal's IoGT (0 when its image
// has none). Counts: each proposal is counted once at its max IoGT over the
// novel GT of its image.
IoGtReport iogt_statistics(const ProposalStore& store, const std::vector<Annotation>& novel_gt);

std::vector<Annotation> novel_annotations(const Dataset& dataset);

enum class ReportFormat { kCsv, kJson };

struct EvalRow {
  std::string category;
  std::string role;  // base | novel | aggregate
  double ap = 0.0;
};

struct MetricRow {
  std::string metric;
  std::optional<double> value;
};

std::vector<EvalRow> eval_rows(const EvalResult& result);
std::vector<MetricRow> iogt_rows(const IoGtReport& report);

// CSV: category,role,AP  /  metric,value. JSON mirrors the rows.
void emit_report(const std::filesystem::path& path, const std::vector<EvalRow>& rows, ReportFormat format);
void emit_report(const std::filesystem::path& path, const std::vector<MetricRow>& rows, ReportFormat format);
std::vector<EvalRow> read_eval_report(const std::filesystem::path& path, ReportFormat format);
std::vector<MetricRow> read_metric_report(const std::filesystem::path& path, ReportFormat format);

}  // namespace ezsd
