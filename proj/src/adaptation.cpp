#include "ezsd/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <unordered_map>

#include "ezsd/util.hpp"

namespace ezsd {

void AdaptConfig::validate() const {
  if (!(learning_rate > 0.0) || batch_size <= 0 || epochs < 0 || !(grad_norm_clip > 0.0) || !(enlarge_factor > 0.0) ||
      !(temperature > 0.0) || weight_decay < 0.0)
    throw EncoderError("invalid adaptation config");
}

std::vector<InstanceCrop> collect_instance_crops(const Dataset& dataset, CropSide side, double enlarge_factor) {
  std::vector<InstanceCrop> crops;
  auto add_side = [&](CategoryRole role) {
    for (const auto& ann : dataset.annotations) {
      const auto& name = dataset.category_name(ann.category_id);
      if (dataset.role(ann.category_id) != role) continue;
      const auto& rec = dataset.image(ann.image_id);
      int label = 0;
      if (side == CropSide::kAll) {
        label = role == CategoryRole::kBase ? *dataset.split.base_index(name)
                                            : static_cast<int>(dataset.split.base.size()) + *dataset.split.novel_index(name);
      } else {
        label = role == CategoryRole::kBase ? *dataset.split.base_index(name) : *dataset.split.novel_index(name);
      }
      Box crop_box;
      try {
        crop_box = enlarge(ann.box, enlarge_factor, Box{0, 0, double(rec.width), double(rec.height)});
      } catch (const GeometryError& e) {
        throw DatasetError("annotation " + std::to_string(ann.id) + ": " + e.what());
      }
      crops.push_back({ann.image_id, ann.id, ann.category_id, ann.box, crop_box, label, ann.size_bin});
    }
  };
  if (side != CropSide::kNovel) add_side(CategoryRole::kBase);
  if (side != CropSide::kBase) add_side(CategoryRole::kNovel);
  return crops;
}

namespace {

std::vector<std::vector<double>> unit_embeddings(const std::vector<TextEmbedding>& embeddings) {
  std::vector<std::vector<double>> out;
  for (const auto& e : embeddings) {
    double n = 0.0;
    for (float v : e.values) n += static_cast<double>(v) * v;
    n = std::sqrt(n);
    if (n == 0.0) throw EncoderError("zero-norm text embedding '" + e.category_name + "'");
    std::vector<double> u(e.values.size());
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = e.values[k] / n;
    out.push_back(std::move(u));
  }
  return out;
}

// Cross-entropy of softmax(cos(f, e_k) / tau) against `label`; optionally dL/df.
double cosine_cross_entropy(std::span<const double> f, const std::vector<std::vector<double>>& unit, int label,
                            double tau, std::vector<double>* df) {
  double norm = 0.0;
  for (double v : f) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw EncoderError("zero-norm feature during adaptation");
  const std::size_t n = unit.size();
  std::vector<double> cos(n), p(n);
  for (std::size_t k = 0; k < n; ++k) {
    double dot = 0.0;
    for (std::size_t d = 0; d < f.size(); ++d) dot += f[d] * unit[k][d];
    cos[k] = dot / norm;
  }
  const double mx = *std::max_element(cos.begin(), cos.end());
  double sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) sum += p[k] = std::exp((cos[k] - mx) / tau);
  for (double& v : p) v /= sum;
  const double loss = -((cos[label] - mx) / tau - std::log(sum));
  if (df) {
    df->assign(f.size(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const double g = (p[k] - (static_cast<int>(k) == label ? 1.0 : 0.0)) / tau;
      if (g == 0.0) continue;
      for (std::size_t d = 0; d < f.size(); ++d) (*df)[d] += g * (unit[k][d] - cos[k] * f[d] / norm) / norm;
    }
  }
  return loss;
}

}  // namespace

FinetuneResult finetune_layernorm(const Encoder& enc, const Dataset& dataset, const std::vector<InstanceCrop>& crops,
                                  const std::vector<TextEmbedding>& base_embeddings, const AdaptConfig& cfg,
                                  int workers) {
  cfg.validate();
  if (crops.empty()) throw EncoderError("finetune_layernorm: empty crop set");
  auto trainable = enc.norm_trainable();
  if (!trainable) throw EncoderError("encoder exposes no normalization partition to finetune");
  const auto unit = unit_embeddings(base_embeddings);
  for (const auto& c : crops)
    if (c.label < 0 || c.label >= static_cast<int>(unit.size()))
      throw EncoderError("crop label outside the base category range");

  std::unordered_map<std::int64_t, Image> images;
  for (const auto& c : crops)
    if (!images.count(c.image_id)) images.emplace(c.image_id, dataset.load_image(dataset.image(c.image_id)));
  std::vector<std::vector<double>> prepared(crops.size());
  parallel_for(crops.size(), workers, [&](std::size_t i) {
    prepared[i] = trainable->prepare(
        crop_and_preprocess(images.at(crops[i].image_id), crops[i].crop_box, enc.input_side(), enc.channel_norm()));
  });

  auto mean_loss = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < crops.size(); ++i)
      total += cosine_cross_entropy(trainable->forward(prepared[i]), unit, crops[i].label, cfg.temperature, nullptr);
    return total / static_cast<double>(crops.size());
  };

  FinetuneResult result;
  result.epoch_losses.push_back(mean_loss());

  std::vector<double> theta = trainable->values();
  std::vector<double> m(theta.size(), 0.0), v(theta.size(), 0.0), grad(theta.size());
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::vector<std::size_t> order(crops.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> df;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, "adapt.shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const auto& z = prepared[order[b]];
        cosine_cross_entropy(trainable->forward(z), unit, crops[order[b]].label, cfg.temperature, &df);
        trainable->backward(z, df, grad);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      double gnorm = 0.0;
      for (double& g : grad) {
        g *= inv;
        gnorm += g * g;
      }
      gnorm = std::sqrt(gnorm);
      if (gnorm > cfg.grad_norm_clip) {
        const double s = cfg.grad_norm_clip / gnorm;
        for (double& g : grad) g *= s;
      }
      ++result.steps;
      const double bc1 = 1.0 - std::pow(kBeta1, result.steps);
      const double bc2 = 1.0 - std::pow(kBeta2, result.steps);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
        theta[i] -= cfg.learning_rate * ((m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps) + cfg.weight_decay * theta[i]);
      }
      trainable->set_values(theta);
    }
    result.epoch_losses.push_back(mean_loss());
  }
  result.encoder = trainable->build();
  return result;
}

std::string_view to_string(AccSetting s) {
  switch (s) {
    case AccSetting::kBase: return "base";
    case AccSetting::kNovel: return "novel";
    case AccSetting::kGeneral: return "general";
  }
  return "?";
}

std::string_view to_string(AccBin b) {
  switch (b) {
    case AccBin::kLarge: return "L";
    case AccBin::kMedium: return "M";
    case AccBin::kSmall: return "S";
    case AccBin::kAvg: return "Avg";
  }
  return "?";
}

std::optional<double> AccCell::accuracy() const {
  if (count == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(count);
}

std::optional<double> AccReport::accuracy(AccSetting s, AccBin b) const {
  const auto it = cells.find({s, b});
  return it == cells.end() ? std::nullopt : it->second.accuracy();
}

namespace {
AccBin bin_of(SizeBin b) {
  switch (b) {
    case SizeBin::kLarge: return AccBin::kLarge;
    case SizeBin::kMedium: return AccBin::kMedium;
    case SizeBin::kSmall: return AccBin::kSmall;
  }
  return AccBin::kSmall;
}
}  // namespace

AccReport evaluate_instance_acc(const Encoder& enc, const Dataset& dataset, const std::vector<AccSetting>& settings,
                                double enlarge_factor, double temperature, const std::string& prompt_template,
                                int workers) {
  AccReport report;
  std::unordered_map<std::int64_t, Image> images;
  for (AccSetting setting : settings) {
    CropSide side = CropSide::kAll;
    std::vector<std::string> names;
    switch (setting) {
      case AccSetting::kBase: side = CropSide::kBase; names = dataset.split.base; break;
      case AccSetting::kNovel: side = CropSide::kNovel; names = dataset.split.novel; break;
      case AccSetting::kGeneral: side = CropSide::kAll; names = dataset.split.all(); break;
    }
    const auto crops = collect_instance_crops(dataset, side, enlarge_factor);
    if (crops.empty() || names.empty()) continue;
    const auto embeddings = encode_text(enc, names, prompt_template);
    for (const auto& c : crops)
      if (!images.count(c.image_id)) images.emplace(c.image_id, dataset.load_image(dataset.image(c.image_id)));

    std::vector<int> preds(crops.size());
    parallel_for(crops.size(), workers, [&](std::size_t i) {
      const auto f = encode_image_region(enc, images.at(crops[i].image_id), crops[i].crop_box);
      preds[i] = classify_feature(f, embeddings, temperature).pred;
    });
    for (std::size_t i = 0; i < crops.size(); ++i) {
      const bool ok = preds[i] == crops[i].label;
      for (AccBin b : {bin_of(crops[i].size_bin), AccBin::kAvg}) {
        auto& cell = report.cells[{setting, b}];
        ++cell.count;
        cell.correct += ok ? 1 : 0;
      }
    }
  }
  return report;
}

void write_acc_csv(const std::filesystem::path& path, const AccReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EncoderError("cannot write accuracy report: " + path.string());
  out << "setting,bin,count,accuracy\n";
  for (AccSetting s : {AccSetting::kBase, AccSetting::kNovel, AccSetting::kGeneral}) {
    for (AccBin b : {AccBin::kLarge, AccBin::kMedium, AccBin::kSmall, AccBin::kAvg}) {
      const auto it = report.cells.find({s, b});
      if (it == report.cells.end() || it->second.count == 0) continue;
      out << to_string(s) << "," << to_string(b) << "," << it->second.count << "," << std::fixed
          << std::setprecision(6) << *it->second.accuracy() << "\n";
    }
  }
}

}  // namespace ezsd
