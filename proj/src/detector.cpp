#include "ezsd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "ezsd/checkpoint.hpp"
#include "ezsd/util.hpp"

namespace ezsd {

using nn::Tensor;

void DetectorConfig::validate() const {
  if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size())
    throw DetectorError("backbone_channels and backbone_strides must be non-empty and equally long");
  int stride = 1;
  for (std::size_t i = 0; i < backbone_strides.size(); ++i) {
    if (backbone_channels[i] <= 0 || (backbone_strides[i] != 1 && backbone_strides[i] != 2))
      throw DetectorError("backbone layers need positive channels and stride 1 or 2");
    stride *= backbone_strides[i];
  }
  if (stride != feature_stride)
    throw DetectorError("backbone strides multiply to " + std::to_string(stride) + ", feature_stride is " +
                        std::to_string(feature_stride));
  rpn_anchors.validate();
  if (rpn_anchors.stride != feature_stride) throw DetectorError("rpn anchor stride must equal feature_stride");
  if (pooled <= 0 || sampling_ratio <= 0 || head_conv_channels <= 0 || cls_hidden <= 0 || reg_dim <= 0)
    throw DetectorError("head dimensions must be positive");
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(rpn_fg_iou) || !unit(rpn_bg_iou) || !unit(fg_iou) || !unit(rpn_pos_fraction) ||
      !unit(roi_pos_fraction) || !unit(nms_iou) || !unit(rpn_nms))
    throw DetectorError("IoU thresholds and fractions must lie in [0, 1]");
  if (rpn_batch <= 0 || roi_batch <= 0 || rpn_pre_nms_train <= 0 || rpn_post_nms_train <= 0 ||
      rpn_pre_nms_test <= 0 || rpn_post_nms_test <= 0 || max_dets <= 0)
    throw DetectorError("sampling and proposal budgets must be positive");
  if (!(temperature > 0.0)) throw DetectorError("temperature must be positive");
  if (batch_size <= 0 || epochs < 0 || max_iters < 0 || warmup_iters < 0) throw DetectorError("invalid schedule");
  if (!(sgd.lr >= 0.0) || !(warmup_ratio > 0.0 && warmup_ratio <= 1.0)) throw DetectorError("invalid learning rate");
}

namespace {

std::vector<std::size_t> sample_subset(std::vector<std::size_t> pool, std::size_t k, std::mt19937_64& rng) {
  if (pool.size() <= k) return pool;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Eigen::VectorXd row_of(const std::vector<float>& flat, std::size_t row, int dim) {
  Eigen::VectorXd v(dim);
  for (int j = 0; j < dim; ++j) v[j] = flat[row * dim + j];
  return v;
}

RowMatrix embeddings_matrix(const std::vector<TextEmbedding>& embs, int dim) {
  RowMatrix m(static_cast<Eigen::Index>(embs.size()), dim);
  for (std::size_t i = 0; i < embs.size(); ++i) {
    if (static_cast<int>(embs[i].values.size()) != dim)
      throw DetectorError("text embedding '" + embs[i].category_name + "' has dimension " +
                          std::to_string(embs[i].values.size()) + ", expected " + std::to_string(dim));
    for (int j = 0; j < dim; ++j) m(static_cast<Eigen::Index>(i), j) = embs[i].values[j];
  }
  return m;
}

}  // namespace

RoiAssignment assign_proposals(const std::vector<Box>& proposals, const std::vector<GtInstance>& gt, int num_base,
                               double fg_iou, int batch, double pos_fraction, std::mt19937_64& rng) {
  std::vector<int> label(proposals.size(), num_base);
  std::vector<int> match(proposals.size(), -1);
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double o = iou(proposals[i], gt[g].box);
      if (o > best) {
        best = o;
        match[i] = static_cast<int>(g);
      }
    }
    if (match[i] >= 0 && best >= fg_iou) {
      label[i] = gt[static_cast<std::size_t>(match[i])].label;
      fg.push_back(i);
    } else {
      bg.push_back(i);
    }
  }
  const auto want_fg = static_cast<std::size_t>(std::floor(batch * pos_fraction));
  const auto fg_keep = sample_subset(fg, want_fg, rng);
  const auto bg_keep = sample_subset(bg, static_cast<std::size_t>(batch) - fg_keep.size(), rng);
  std::vector<std::size_t> keep;
  std::merge(fg_keep.begin(), fg_keep.end(), bg_keep.begin(), bg_keep.end(), std::back_inserter(keep));

  RoiAssignment out;
  for (std::size_t i : keep) {
    out.boxes.push_back(proposals[i]);
    out.labels.push_back(label[i]);
    out.targets.push_back(label[i] < num_base
                              ? encode_deltas(proposals[i], gt[static_cast<std::size_t>(match[i])].box)
                              : BoxDeltas{});
  }
  return out;
}

std::vector<Box> rpn_anchor_layout(int feat_h, int feat_w, const AnchorConfig& cfg) {
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(feat_h) * feat_w * cfg.sizes.size() * cfg.ratios.size());
  for (int y = 0; y < feat_h; ++y)
    for (int x = 0; x < feat_w; ++x) {
      const double cx = cfg.stride * (x + 0.5), cy = cfg.stride * (y + 0.5);
      for (double s : cfg.sizes)
        for (double r : cfg.ratios) {
          const double w = s / std::sqrt(r), h = s * std::sqrt(r);
          out.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
        }
    }
  return out;
}

std::vector<SlotDetection> decode_detections(const std::vector<Box>& proposals, const RowMatrix& features,
                                             const RowMatrix& reg_features, const TextClassifierState& state,
                                             const SemanticRegressor& regressor, double image_w, double image_h,
                                             const DetectorConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(proposals.size());
  if (features.rows() != n || reg_features.rows() != n) throw DetectorError("region feature count mismatch");
  const int bg = state.background_slot(LogitMode::kInference);
  const int nb = static_cast<int>(state.base.rows());

  std::map<int, std::vector<SlotDetection>> by_slot;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd f = features.row(i).transpose();
    if (!(f.norm() > 0.0)) continue;
    const Eigen::VectorXd p = softmax(cosine_logits(f, state, LogitMode::kInference));
    int best = 0;
    for (int k = 1; k < p.size(); ++k)
      if (p[k] > p[best]) best = k;
    if (best == bg) {
      if (cfg.bg_suppression) continue;
      best = 0;
      for (int k = 1; k < bg; ++k)
        if (p[k] > p[best]) best = k;
    }
    if (bg == 0 || p[best] < cfg.score_threshold) continue;
    const Eigen::VectorXd emb =
        best < nb ? Eigen::VectorXd(state.base.row(best).transpose()) : Eigen::VectorXd(state.novel.row(best - nb).transpose());
    const Eigen::Vector4d d = semantic_regress(reg_features.row(i).transpose(), emb, regressor);
    const Box box = clip_to_image(decode_deltas(proposals[static_cast<std::size_t>(i)], {d[0], d[1], d[2], d[3]}),
                                  image_w, image_h);
    if (!box.valid()) continue;
    by_slot[best].push_back({box, best, p[best]});
  }

  std::vector<SlotDetection> out;
  for (auto& [slot, dets] : by_slot) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (const auto& d : dets) {
      boxes.push_back(d.box);
      scores.push_back(d.score);
    }
    for (std::size_t k : nms(boxes, scores, cfg.nms_iou)) out.push_back(dets[k]);
  }
  std::stable_sort(out.begin(), out.end(), [](const SlotDetection& a, const SlotDetection& b) { return a.score > b.score; });
  if (out.size() > static_cast<std::size_t>(cfg.max_dets)) out.resize(static_cast<std::size_t>(cfg.max_dets));
  return out;
}

// ---- Detector -------------------------------------------------------------

Detector::Detector(const DetectorConfig& cfg, const std::vector<TextEmbedding>& base) : cfg_(cfg) {
  cfg_.validate();
  if (base.empty()) throw DetectorError("detector needs at least one base category embedding");
  embed_dim_ = static_cast<int>(base.front().values.size());
  if (embed_dim_ <= 0) throw DetectorError("text embeddings are empty");
  base_ = embeddings_matrix(base, embed_dim_);
  for (const auto& e : base) base_names_.push_back(e.category_name);
  build(cfg_.seed);
}

void Detector::build(std::uint64_t seed) {
  backbone_.clear();
  int in = 3;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    backbone_.emplace_back("backbone." + std::to_string(i), in, cfg_.backbone_channels[i], 3, cfg_.backbone_strides[i], 1);
    in = cfg_.backbone_channels[i];
  }
  const int cf = in;
  const int a = static_cast<int>(cfg_.rpn_anchors.sizes.size() * cfg_.rpn_anchors.ratios.size());
  rpn_conv_ = nn::Conv2d("rpn.conv", cf, cf, 3, 1, 1);
  rpn_cls_ = nn::Conv2d("rpn.cls", cf, a, 1, 1, 0);
  rpn_reg_ = nn::Conv2d("rpn.reg", cf, 4 * a, 1, 1, 0);
  const int hc = cfg_.head_conv_channels;
  const int flat = hc * cfg_.pooled * cfg_.pooled;
  cls_conv1_ = nn::Conv2d("cls.conv1", cf, hc, 3, 1, 1);
  cls_conv2_ = nn::Conv2d("cls.conv2", hc, hc, 3, 1, 1);
  cls_fc1_ = nn::Linear("cls.fc1", flat, cfg_.cls_hidden);
  cls_fc2_ = nn::Linear("cls.fc2", cfg_.cls_hidden, embed_dim_);
  reg_conv1_ = nn::Conv2d("reg.conv1", cf, hc, 3, 1, 1);
  reg_conv2_ = nn::Conv2d("reg.conv2", hc, hc, 3, 1, 1);
  reg_fc_ = nn::Linear("reg.fc", flat, cfg_.reg_dim);
  reg_out_w_ = nn::Param("reg.out.weight", {4, cfg_.reg_dim + embed_dim_});
  reg_out_b_ = nn::Param("reg.out.bias", {4}, false);
  background_ = nn::Param("text.background", {embed_dim_}, false);

  for (nn::Param* p : params()) {
    if (p->shape.size() < 2 && p != &background_) continue;
    std::mt19937_64 rng(derive_seed(seed, "detector.init", fnv1a64(p->name)));
    double fan_in = 1.0;
    for (std::size_t k = 1; k < p->shape.size(); ++k) fan_in *= static_cast<double>(p->shape[k]);
    double std = std::sqrt(2.0 / fan_in);
    if (p->name == "rpn.cls.weight" || p->name == "rpn.reg.weight") std = 0.01;
    if (p->name == "cls.fc2.weight") std = std::sqrt(1.0 / fan_in);
    if (p->name == "reg.out.weight") std = 0.001;
    if (p == &background_) std = 1.0;
    nn::init_normal(*p, std, rng);
  }
}

std::vector<nn::Param*> Detector::params() {
  std::vector<nn::Param*> out;
  for (auto& c : backbone_)
    for (auto* p : c.params()) out.push_back(p);
  for (auto* layer : {&rpn_conv_, &rpn_cls_, &rpn_reg_, &cls_conv1_, &cls_conv2_})
    for (auto* p : layer->params()) out.push_back(p);
  for (auto* p : cls_fc1_.params()) out.push_back(p);
  for (auto* p : cls_fc2_.params()) out.push_back(p);
  for (auto* p : reg_conv1_.params()) out.push_back(p);
  for (auto* p : reg_conv2_.params()) out.push_back(p);
  for (auto* p : reg_fc_.params()) out.push_back(p);
  out.push_back(&reg_out_w_);
  out.push_back(&reg_out_b_);
  out.push_back(&background_);
  return out;
}

void Detector::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

TextClassifierState Detector::text_state() const {
  TextClassifierState s;
  s.base = base_;
  s.novel = RowMatrix(0, embed_dim_);
  s.background = Eigen::VectorXd(embed_dim_);
  for (int j = 0; j < embed_dim_; ++j) s.background[j] = background_.value[j];
  s.temperature = cfg_.temperature;
  return s;
}

SemanticRegressor Detector::regressor() const {
  SemanticRegressor r;
  const int in = cfg_.reg_dim + embed_dim_;
  r.weight.resize(4, in);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < in; ++j) r.weight(i, j) = reg_out_w_.value[static_cast<std::size_t>(i) * in + j];
  for (int i = 0; i < 4; ++i) r.bias[i] = reg_out_b_.value[i];
  return r;
}

Tensor Detector::preprocess(const Image& image) const {
  const ChannelNorm norm;
  Tensor x(1, 3, image.height, image.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int xx = 0; xx < image.width; ++xx)
        x.at(0, c, y, xx) = (image.at(xx, y, c) / 255.0f - norm.mean[c]) / norm.std[c];
  return x;
}

Tensor Detector::backbone_forward(const Tensor& x, std::vector<nn::Conv2d::Cache>* caches,
                                  std::vector<Tensor>* acts) const {
  Tensor h = x;
  if (caches) caches->resize(backbone_.size());
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    h = backbone_[i].forward(h, caches ? &(*caches)[i] : nullptr);
    nn::relu_inplace(h.v);
    if (acts) acts->push_back(h);
  }
  return h;
}

std::vector<Box> Detector::rpn_proposals(const Tensor& obj, const Tensor& deltas, int image_w, int image_h,
                                         int pre_nms, int post_nms) const {
  const auto anchors = rpn_anchor_layout(obj.h, obj.w, cfg_.rpn_anchors);
  const int a = obj.c;
  std::vector<double> score(anchors.size());
  for (int y = 0; y < obj.h; ++y)
    for (int x = 0; x < obj.w; ++x)
      for (int k = 0; k < a; ++k) score[(static_cast<std::size_t>(y) * obj.w + x) * a + k] = obj.at(0, k, y, x);
  std::vector<std::size_t> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return score[l] > score[r]; });

  std::vector<Box> boxes;
  std::vector<double> kept_scores;
  for (std::size_t idx : order) {
    if (boxes.size() >= static_cast<std::size_t>(pre_nms)) break;
    const int k = static_cast<int>(idx % a);
    const auto cell = idx / a;
    const int y = static_cast<int>(cell / obj.w), x = static_cast<int>(cell % obj.w);
    const BoxDeltas d{deltas.at(0, 4 * k, y, x), deltas.at(0, 4 * k + 1, y, x), deltas.at(0, 4 * k + 2, y, x),
                      deltas.at(0, 4 * k + 3, y, x)};
    const Box b = clip_to_image(decode_deltas(anchors[idx], d), image_w, image_h);
    if (b.width() < cfg_.rpn_min_size || b.height() < cfg_.rpn_min_size) continue;
    boxes.push_back(b);
    kept_scores.push_back(score[idx]);
  }
  std::vector<Box> out;
  for (std::size_t k : nms(boxes, kept_scores, cfg_.rpn_nms)) {
    if (out.size() >= static_cast<std::size_t>(post_nms)) break;
    out.push_back(boxes[k]);
  }
  return out;
}

std::vector<Box> Detector::propose(const Image& image) const {
  const Tensor feat = backbone_forward(preprocess(image), nullptr, nullptr);
  Tensor h = rpn_conv_.forward(feat, nullptr);
  nn::relu_inplace(h.v);
  return rpn_proposals(rpn_cls_.forward(h, nullptr), rpn_reg_.forward(h, nullptr), image.width, image.height,
                       cfg_.rpn_pre_nms_test, cfg_.rpn_post_nms_test);
}

namespace {

nn::RoiAlign make_roi(const DetectorConfig& cfg) {
  return {cfg.pooled, 1.0 / cfg.feature_stride, cfg.sampling_ratio};
}

}  // namespace

RowMatrix Detector::region_features(const Image& image, const std::vector<Box>& boxes) const {
  const Tensor feat = backbone_forward(preprocess(image), nullptr, nullptr);
  const auto roi = make_roi(cfg_);
  RowMatrix out(static_cast<Eigen::Index>(boxes.size()), embed_dim_);
  if (boxes.empty()) return out;
  Tensor c = cls_conv1_.forward(roi.forward(feat, boxes), nullptr);
  nn::relu_inplace(c.v);
  c = cls_conv2_.forward(c, nullptr);
  nn::relu_inplace(c.v);
  const int r = static_cast<int>(boxes.size());
  auto f1 = cls_fc1_.forward(c.v, r);
  nn::relu_inplace(f1);
  const auto f2 = cls_fc2_.forward(f1, r);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < embed_dim_; ++j) out(i, j) = f2[static_cast<std::size_t>(i) * embed_dim_ + j];
  return out;
}

std::vector<SlotDetection> Detector::infer(const Image& image, const std::vector<TextEmbedding>& novel) const {
  const Tensor feat = backbone_forward(preprocess(image), nullptr, nullptr);
  Tensor h = rpn_conv_.forward(feat, nullptr);
  nn::relu_inplace(h.v);
  const auto proposals = rpn_proposals(rpn_cls_.forward(h, nullptr), rpn_reg_.forward(h, nullptr), image.width,
                                       image.height, cfg_.rpn_pre_nms_test, cfg_.rpn_post_nms_test);
  TextClassifierState state = text_state();
  state.novel = embeddings_matrix(novel, embed_dim_);
  const int r = static_cast<int>(proposals.size());
  if (r == 0) return {};

  const auto roi = make_roi(cfg_);
  const Tensor pooled = roi.forward(feat, proposals);
  Tensor c = cls_conv1_.forward(pooled, nullptr);
  nn::relu_inplace(c.v);
  c = cls_conv2_.forward(c, nullptr);
  nn::relu_inplace(c.v);
  auto f1 = cls_fc1_.forward(c.v, r);
  nn::relu_inplace(f1);
  const auto f2 = cls_fc2_.forward(f1, r);

  Tensor g = reg_conv1_.forward(pooled, nullptr);
  nn::relu_inplace(g.v);
  g = reg_conv2_.forward(g, nullptr);
  nn::relu_inplace(g.v);
  auto rf = reg_fc_.forward(g.v, r);
  nn::relu_inplace(rf);

  RowMatrix features(r, embed_dim_), reg(r, cfg_.reg_dim);
  for (int i = 0; i < r; ++i) {
    features.row(i) = row_of(f2, static_cast<std::size_t>(i), embed_dim_).transpose();
    reg.row(i) = row_of(rf, static_cast<std::size_t>(i), cfg_.reg_dim).transpose();
  }
  return decode_detections(proposals, features, reg, state, regressor(), image.width, image.height, cfg_);
}

LossBreakdown Detector::accumulate(const TrainSample& sample, std::uint64_t step_seed, double grad_scale) {
  if (!sample.image) throw DetectorError("training sample has no pixels");
  const Image& image = *sample.image;
  std::mt19937_64 rng(step_seed);
  const int nb = num_base();
  LossBreakdown loss;

  std::vector<nn::Conv2d::Cache> bb_caches;
  std::vector<Tensor> acts;
  const Tensor x = preprocess(image);
  const Tensor feat = backbone_forward(x, &bb_caches, &acts);
  Tensor d_feat(feat.n, feat.c, feat.h, feat.w);

  // Proposal network.
  nn::Conv2d::Cache rpn_c, cls_c, reg_c;
  Tensor h = rpn_conv_.forward(feat, &rpn_c);
  nn::relu_inplace(h.v);
  const Tensor obj = rpn_cls_.forward(h, &cls_c);
  const Tensor del = rpn_reg_.forward(h, &reg_c);
  {
    const auto anchors = rpn_anchor_layout(feat.h, feat.w, cfg_.rpn_anchors);
    const int a = obj.c;
    std::vector<int> label(anchors.size(), -1);  // 1 fg, 0 bg, -1 ignored
    std::vector<int> match(anchors.size(), -1);
    std::vector<double> best_for_gt(sample.gt.size(), 0.0);
    std::vector<double> best_iou(anchors.size(), 0.0);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      for (std::size_t g = 0; g < sample.gt.size(); ++g) {
        const double o = iou(anchors[i], sample.gt[g].box);
        if (o > best_iou[i]) {
          best_iou[i] = o;
          match[i] = static_cast<int>(g);
        }
        best_for_gt[g] = std::max(best_for_gt[g], o);
      }
      if (best_iou[i] < cfg_.rpn_bg_iou) label[i] = 0;
      if (best_iou[i] >= cfg_.rpn_fg_iou) label[i] = 1;
    }
    for (std::size_t i = 0; i < anchors.size(); ++i)
      for (std::size_t g = 0; g < sample.gt.size(); ++g)
        if (best_for_gt[g] > 0.0 && iou(anchors[i], sample.gt[g].box) == best_for_gt[g]) {
          label[i] = 1;
          match[i] = static_cast<int>(g);
        }
    std::vector<std::size_t> fg, bg;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (label[i] == 1) fg.push_back(i);
      if (label[i] == 0) bg.push_back(i);
    }
    const auto fg_keep =
        sample_subset(fg, static_cast<std::size_t>(std::floor(cfg_.rpn_batch * cfg_.rpn_pos_fraction)), rng);
    const auto bg_keep = sample_subset(bg, static_cast<std::size_t>(cfg_.rpn_batch) - fg_keep.size(), rng);
    const double s = static_cast<double>(fg_keep.size() + bg_keep.size());

    Tensor d_obj(obj.n, obj.c, obj.h, obj.w), d_del(del.n, del.c, del.h, del.w);
    auto visit = [&](std::size_t idx, bool positive) {
      const int k = static_cast<int>(idx % a);
      const auto cell = idx / a;
      const int y = static_cast<int>(cell / obj.w), xx = static_cast<int>(cell % obj.w);
      const double z = obj.at(0, k, y, xx);
      loss.rpn_obj += (softplus(z) - (positive ? z : 0.0)) / s;
      d_obj.at(0, k, y, xx) = static_cast<float>((sigmoid(z) - (positive ? 1.0 : 0.0)) / s * grad_scale);
      if (!positive) return;
      const BoxDeltas t = encode_deltas(anchors[idx], sample.gt[static_cast<std::size_t>(match[idx])].box);
      const double tv[4] = {t.dx, t.dy, t.dw, t.dh};
      for (int c = 0; c < 4; ++c) {
        const double diff = del.at(0, 4 * k + c, y, xx) - tv[c];
        loss.rpn_reg += std::abs(diff) / s;
        d_del.at(0, 4 * k + c, y, xx) = static_cast<float>(sign(diff) / s * grad_scale);
      }
    };
    if (s > 0) {
      for (std::size_t i : fg_keep) visit(i, true);
      for (std::size_t i : bg_keep) visit(i, false);
    }
    Tensor d_h = rpn_cls_.backward(cls_c, d_obj, true);
    const Tensor d_h2 = rpn_reg_.backward(reg_c, d_del, true);
    for (std::size_t i = 0; i < d_h.size(); ++i) d_h.v[i] += d_h2.v[i];
    nn::relu_backward(h.v, d_h.v);
    const Tensor d_f = rpn_conv_.backward(rpn_c, d_h, true);
    for (std::size_t i = 0; i < d_feat.size(); ++i) d_feat.v[i] += d_f.v[i];
  }

  // RoI sampling: proposal network output plus GT boxes.
  std::vector<Box> proposals = rpn_proposals(obj, del, image.width, image.height, cfg_.rpn_pre_nms_train,
                                             cfg_.rpn_post_nms_train);
  for (const auto& g : sample.gt) proposals.push_back(g.box);
  const RoiAssignment assigned = assign_proposals(proposals, sample.gt, nb, cfg_.fg_iou, cfg_.roi_batch,
                                                  cfg_.roi_pos_fraction, rng);
  const int ns = static_cast<int>(assigned.boxes.size());

  std::vector<Box> cls_boxes = assigned.boxes;
  const bool distill = cfg_.distill && !sample.distill.empty();
  if (distill)
    for (const auto& p : sample.distill) cls_boxes.push_back(p.box);
  const int rc = static_cast<int>(cls_boxes.size());
  const auto roi = make_roi(cfg_);
  const TextClassifierState state = text_state();
  Eigen::VectorXd d_bg = Eigen::VectorXd::Zero(embed_dim_);

  if (rc > 0) {
    // Conv_c over sampled proposals followed by the distillation regions.
    const Tensor pooled = roi.forward(feat, cls_boxes);
    nn::Conv2d::Cache c1c, c2c;
    Tensor c1 = cls_conv1_.forward(pooled, &c1c);
    nn::relu_inplace(c1.v);
    Tensor c2 = cls_conv2_.forward(c1, &c2c);
    nn::relu_inplace(c2.v);
    auto f1 = cls_fc1_.forward(c2.v, rc);
    nn::relu_inplace(f1);
    const auto f2 = cls_fc2_.forward(f1, rc);
    std::vector<float> d_f2(f2.size(), 0.0f);

    if (ns > 0) {
      RowMatrix logits(ns, state.slots(LogitMode::kTrain));
      std::vector<Eigen::VectorXd> feats(static_cast<std::size_t>(ns));
      for (int i = 0; i < ns; ++i) {
        feats[static_cast<std::size_t>(i)] = row_of(f2, static_cast<std::size_t>(i), embed_dim_);
        if (!(feats[static_cast<std::size_t>(i)].norm() > 0.0)) feats[static_cast<std::size_t>(i)][0] = 1e-12;
        logits.row(i) = cosine_logits(feats[static_cast<std::size_t>(i)], state, LogitMode::kTrain).transpose();
      }
      RowMatrix d_logits;
      loss.cls = classification_loss(logits, assigned.labels, &d_logits);
      for (int i = 0; i < ns; ++i) {
        Eigen::VectorXd d_p = Eigen::VectorXd::Zero(embed_dim_);
        cosine_logits_backward(feats[static_cast<std::size_t>(i)], state, LogitMode::kTrain,
                               d_logits.row(i).transpose() * grad_scale, d_p, d_bg);
        for (int j = 0; j < embed_dim_; ++j) d_f2[static_cast<std::size_t>(i) * embed_dim_ + j] += static_cast<float>(d_p[j]);
      }
    }

    if (distill) {
      const int m = rc - ns;
      RowMatrix model(m, embed_dim_), target(m, embed_dim_);
      std::vector<double> weights(static_cast<std::size_t>(m));
      for (int i = 0; i < m; ++i) {
        const auto& p = sample.distill[static_cast<std::size_t>(i)];
        if (static_cast<int>(p.feature.size()) != embed_dim_)
          throw DetectorError("distillation feature dimension differs from the detector embedding dimension");
        model.row(i) = row_of(f2, static_cast<std::size_t>(ns + i), embed_dim_).transpose();
        for (int j = 0; j < embed_dim_; ++j) target(i, j) = p.feature[static_cast<std::size_t>(j)];
        weights[static_cast<std::size_t>(i)] = p.objectness;
      }
      RowMatrix d_model;
      if (cfg_.normalize_distill) {
        RowMatrix nm = model, nt = target;
        for (int i = 0; i < m; ++i) {
          nm.row(i) /= std::max(model.row(i).norm(), 1e-12);
          nt.row(i) /= std::max(target.row(i).norm(), 1e-12);
        }
        RowMatrix d_nm;
        loss.dist = distillation_loss(nm, nt, weights, &d_nm);
        d_model.resize(m, embed_dim_);
        for (int i = 0; i < m; ++i) {
          const double n = std::max(model.row(i).norm(), 1e-12);
          const Eigen::RowVectorXd u = nm.row(i);
          d_model.row(i) = (d_nm.row(i) - d_nm.row(i).dot(u) * u) / n;
        }
      } else {
        loss.dist = distillation_loss(model, target, weights, &d_model);
      }
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < embed_dim_; ++j)
          d_f2[static_cast<std::size_t>(ns + i) * embed_dim_ + j] += static_cast<float>(d_model(i, j) * grad_scale);
    }

    auto d_f1 = cls_fc2_.backward(f1, d_f2, rc, true);
    nn::relu_backward(f1, d_f1);
    auto d_c2v = cls_fc1_.backward(c2.v, d_f1, rc, true);
    Tensor d_c2(c2.n, c2.c, c2.h, c2.w);
    d_c2.v = std::move(d_c2v);
    nn::relu_backward(c2.v, d_c2.v);
    Tensor d_c1 = cls_conv2_.backward(c2c, d_c2, true);
    nn::relu_backward(c1.v, d_c1.v);
    const Tensor d_pooled = cls_conv1_.backward(c1c, d_c1, true);
    roi.backward(feat, cls_boxes, d_pooled, d_feat);
  }
  for (int j = 0; j < embed_dim_; ++j) background_.grad[j] += static_cast<float>(d_bg[j]);

  // Conv_r and the semantic regressor over foreground proposals.
  std::vector<Box> fg_boxes;
  std::vector<int> fg_rows;
  for (int i = 0; i < ns; ++i)
    if (assigned.labels[static_cast<std::size_t>(i)] < nb) {
      fg_boxes.push_back(assigned.boxes[static_cast<std::size_t>(i)]);
      fg_rows.push_back(i);
    }
  const int k = static_cast<int>(fg_boxes.size());
  if (k > 0) {
    const Tensor pooled = roi.forward(feat, fg_boxes);
    nn::Conv2d::Cache r1c, r2c;
    Tensor r1 = reg_conv1_.forward(pooled, &r1c);
    nn::relu_inplace(r1.v);
    Tensor r2 = reg_conv2_.forward(r1, &r2c);
    nn::relu_inplace(r2.v);
    auto rf = reg_fc_.forward(r2.v, k);
    nn::relu_inplace(rf);

    const SemanticRegressor head = regressor();
    RowMatrix pred(k, 4), target(k, 4);
    std::vector<Eigen::VectorXd> rs(static_cast<std::size_t>(k)), embs(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      const auto row = static_cast<std::size_t>(fg_rows[static_cast<std::size_t>(i)]);
      rs[static_cast<std::size_t>(i)] = row_of(rf, static_cast<std::size_t>(i), cfg_.reg_dim);
      embs[static_cast<std::size_t>(i)] = base_.row(assigned.labels[row]).transpose();
      pred.row(i) = semantic_regress(rs[static_cast<std::size_t>(i)], embs[static_cast<std::size_t>(i)], head).transpose();
      const BoxDeltas& t = assigned.targets[row];
      target.row(i) << t.dx, t.dy, t.dw, t.dh;
    }
    RowMatrix d_pred;
    loss.reg = regression_loss(pred, target, &d_pred);
    std::vector<float> d_rf(rf.size(), 0.0f);
    const int in = cfg_.reg_dim + embed_dim_;
    for (int i = 0; i < k; ++i) {
      const Eigen::Vector4d dd = d_pred.row(i).transpose() * grad_scale;
      const auto g = semantic_regress_backward(rs[static_cast<std::size_t>(i)], embs[static_cast<std::size_t>(i)], head, dd);
      for (int j = 0; j < cfg_.reg_dim; ++j) d_rf[static_cast<std::size_t>(i) * cfg_.reg_dim + j] = static_cast<float>(g.d_r[j]);
      for (int a = 0; a < 4; ++a) {
        for (int j = 0; j < in; ++j) reg_out_w_.grad[static_cast<std::size_t>(a) * in + j] += static_cast<float>(g.d_weight(a, j));
        reg_out_b_.grad[a] += static_cast<float>(g.d_bias[a]);
      }
    }
    nn::relu_backward(rf, d_rf);
    auto d_r2v = reg_fc_.backward(r2.v, d_rf, k, true);
    Tensor d_r2(r2.n, r2.c, r2.h, r2.w);
    d_r2.v = std::move(d_r2v);
    nn::relu_backward(r2.v, d_r2.v);
    Tensor d_r1 = reg_conv2_.backward(r2c, d_r2, true);
    nn::relu_backward(r1.v, d_r1.v);
    const Tensor d_pooled = reg_conv1_.backward(r1c, d_r1, true);
    roi.backward(feat, fg_boxes, d_pooled, d_feat);
  }

  // Backbone.
  Tensor d = std::move(d_feat);
  for (std::size_t i = backbone_.size(); i-- > 0;) {
    nn::relu_backward(acts[i].v, d.v);
    d = backbone_[i].backward(bb_caches[i], d, i > 0);
  }
  return loss;
}

// ---- Persistence ----------------------------------------------------------

void Detector::save(const std::filesystem::path& path, const nlohmann::json& meta) const {
  Checkpoint ckpt;
  ckpt.header = meta;
  const nlohmann::json cfg = to_json(cfg_);
  ckpt.header["detector"] = {{"config", cfg},
                             {"embed_dim", embed_dim_},
                             {"base_categories", base_names_},
                             {"fingerprint", fnv1a64(cfg.dump())}};
  for (nn::Param* p : const_cast<Detector*>(this)->params()) ckpt.arrays.push_back({p->name, p->shape, p->value});
  NamedArray base{"text.base", {num_base(), embed_dim_}, {}};
  for (int i = 0; i < num_base(); ++i)
    for (int j = 0; j < embed_dim_; ++j) base.data.push_back(static_cast<float>(base_(i, j)));
  ckpt.arrays.push_back(std::move(base));
  write_checkpoint(path, ckpt);
}

Detector Detector::load(const std::filesystem::path& path, nlohmann::json* meta) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (!ckpt.header.contains("detector")) throw DetectorError("not a detector checkpoint: " + path.string());
  const auto& d = ckpt.header.at("detector");
  DetectorConfig cfg;
  update_from_json(cfg, d.at("config"));
  const int dim = d.at("embed_dim").get<int>();
  const auto names = d.at("base_categories").get<std::vector<std::string>>();
  const NamedArray& base = ckpt.at("text.base");
  if (base.shape != std::vector<std::int64_t>{static_cast<std::int64_t>(names.size()), dim})
    throw DetectorError("text.base shape does not match the category list");
  std::vector<TextEmbedding> embs;
  for (std::size_t i = 0; i < names.size(); ++i)
    embs.push_back({names[i], std::vector<float>(base.data.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                                 base.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim))});
  Detector det(cfg, embs);
  for (nn::Param* p : det.params()) {
    const NamedArray* a = ckpt.find(p->name);
    if (!a) throw DetectorError("checkpoint lacks parameter " + p->name);
    if (a->shape != p->shape) throw DetectorError("checkpoint parameter " + p->name + " has a different shape");
    p->value = a->data;
  }
  if (meta) {
    *meta = ckpt.header;
  }
  return det;
}

// ---- Config JSON ----------------------------------------------------------

nlohmann::json to_json(const DetectorConfig& c) {
  return {
      {"backbone_channels", c.backbone_channels},
      {"backbone_strides", c.backbone_strides},
      {"feature_stride", c.feature_stride},
      {"pooled", c.pooled},
      {"sampling_ratio", c.sampling_ratio},
      {"head_conv_channels", c.head_conv_channels},
      {"cls_hidden", c.cls_hidden},
      {"reg_dim", c.reg_dim},
      {"rpn_anchors", {{"stride", c.rpn_anchors.stride}, {"sizes", c.rpn_anchors.sizes}, {"ratios", c.rpn_anchors.ratios}}},
      {"rpn_fg_iou", c.rpn_fg_iou},
      {"rpn_bg_iou", c.rpn_bg_iou},
      {"rpn_batch", c.rpn_batch},
      {"rpn_pos_fraction", c.rpn_pos_fraction},
      {"rpn_nms", c.rpn_nms},
      {"rpn_pre_nms_train", c.rpn_pre_nms_train},
      {"rpn_post_nms_train", c.rpn_post_nms_train},
      {"rpn_pre_nms_test", c.rpn_pre_nms_test},
      {"rpn_post_nms_test", c.rpn_post_nms_test},
      {"rpn_min_size", c.rpn_min_size},
      {"fg_iou", c.fg_iou},
      {"roi_batch", c.roi_batch},
      {"roi_pos_fraction", c.roi_pos_fraction},
      {"temperature", c.temperature},
      {"distill", c.distill},
      {"normalize_distill", c.normalize_distill},
      {"sgd", {{"lr", c.sgd.lr}, {"momentum", c.sgd.momentum}, {"weight_decay", c.sgd.weight_decay}, {"grad_clip", c.sgd.grad_clip}}},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"max_iters", c.max_iters},
      {"warmup_iters", c.warmup_iters},
      {"warmup_ratio", c.warmup_ratio},
      {"lr_steps", c.lr_steps},
      {"lr_gamma", c.lr_gamma},
      {"score_threshold", c.score_threshold},
      {"nms_iou", c.nms_iou},
      {"max_dets", c.max_dets},
      {"bg_suppression", c.bg_suppression},
      {"seed", c.seed},
  };
}

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  for (const auto& [key, value] : j.items())
    if (!reference.contains(key)) throw DetectorError("unknown key '" + key + "' in " + where);
}

}  // namespace

void update_from_json(DetectorConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw DetectorError("detector config must be an object");
  reject_unknown(j, to_json(c), "detector config");
  take(j, "backbone_channels", c.backbone_channels);
  take(j, "backbone_strides", c.backbone_strides);
  take(j, "feature_stride", c.feature_stride);
  take(j, "pooled", c.pooled);
  take(j, "sampling_ratio", c.sampling_ratio);
  take(j, "head_conv_channels", c.head_conv_channels);
  take(j, "cls_hidden", c.cls_hidden);
  take(j, "reg_dim", c.reg_dim);
  if (j.contains("rpn_anchors")) {
    const auto& a = j.at("rpn_anchors");
    reject_unknown(a, {{"stride", 0}, {"sizes", 0}, {"ratios", 0}}, "detector.rpn_anchors");
    take(a, "stride", c.rpn_anchors.stride);
    take(a, "sizes", c.rpn_anchors.sizes);
    take(a, "ratios", c.rpn_anchors.ratios);
  }
  take(j, "rpn_fg_iou", c.rpn_fg_iou);
  take(j, "rpn_bg_iou", c.rpn_bg_iou);
  take(j, "rpn_batch", c.rpn_batch);
  take(j, "rpn_pos_fraction", c.rpn_pos_fraction);
  take(j, "rpn_nms", c.rpn_nms);
  take(j, "rpn_pre_nms_train", c.rpn_pre_nms_train);
  take(j, "rpn_post_nms_train", c.rpn_post_nms_train);
  take(j, "rpn_pre_nms_test", c.rpn_pre_nms_test);
  take(j, "rpn_post_nms_test", c.rpn_post_nms_test);
  take(j, "rpn_min_size", c.rpn_min_size);
  take(j, "fg_iou", c.fg_iou);
  take(j, "roi_batch", c.roi_batch);
  take(j, "roi_pos_fraction", c.roi_pos_fraction);
  take(j, "temperature", c.temperature);
  take(j, "distill", c.distill);
  take(j, "normalize_distill", c.normalize_distill);
  if (j.contains("sgd")) {
    const auto& s = j.at("sgd");
    reject_unknown(s, {{"lr", 0}, {"momentum", 0}, {"weight_decay", 0}, {"grad_clip", 0}}, "detector.sgd");
    take(s, "lr", c.sgd.lr);
    take(s, "momentum", c.sgd.momentum);
    take(s, "weight_decay", c.sgd.weight_decay);
    take(s, "grad_clip", c.sgd.grad_clip);
  }
  take(j, "batch_size", c.batch_size);
  take(j, "epochs", c.epochs);
  take(j, "max_iters", c.max_iters);
  take(j, "warmup_iters", c.warmup_iters);
  take(j, "warmup_ratio", c.warmup_ratio);
  take(j, "lr_steps", c.lr_steps);
  take(j, "lr_gamma", c.lr_gamma);
  take(j, "score_threshold", c.score_threshold);
  take(j, "nms_iou", c.nms_iou);
  take(j, "max_dets", c.max_dets);
  take(j, "bg_suppression", c.bg_suppression);
  take(j, "seed", c.seed);
}

}  // namespace ezsd
