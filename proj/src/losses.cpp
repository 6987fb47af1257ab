#include "ezsd/losses.hpp"

#include <cmath>
#include <string>

namespace ezsd {

double distillation_loss(const RowMatrix& model_feats, const RowMatrix& clip_feats, std::span<const double> weights,
                         RowMatrix* d_model) {
  const auto m = model_feats.rows();
  if (clip_feats.rows() != m || static_cast<Eigen::Index>(weights.size()) != m)
    throw LossError("distillation inputs differ in proposal count");
  if (clip_feats.cols() != model_feats.cols()) throw LossError("distillation feature dimensions differ");
  if (d_model) d_model->setZero(m, model_feats.cols());
  if (m == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double o = weights[static_cast<std::size_t>(i)];
    if (!(o >= 0.0)) throw LossError("distillation weights must be non-negative");
    sum += o * (clip_feats.row(i) - model_feats.row(i)).cwiseAbs().sum();
    if (d_model) {
      for (Eigen::Index j = 0; j < model_feats.cols(); ++j) {
        const double diff = clip_feats(i, j) - model_feats(i, j);
        (*d_model)(i, j) = diff > 0.0 ? -o / m : (diff < 0.0 ? o / m : 0.0);
      }
    }
  }
  return sum / static_cast<double>(m);
}

int TextClassifierState::slots(LogitMode mode) const {
  const auto n = base.rows() + (mode == LogitMode::kInference ? novel.rows() : 0);
  return static_cast<int>(n) + 1;
}

namespace {

const double* slot_row(const TextClassifierState& s, LogitMode mode, int k, Eigen::Index& len) {
  len = s.dim();
  const int nb = static_cast<int>(s.base.rows());
  if (k < nb) return s.base.row(k).data();
  if (mode == LogitMode::kInference && k < nb + static_cast<int>(s.novel.rows())) return s.novel.row(k - nb).data();
  return s.background.data();
}

void check_dims(const Eigen::VectorXd& feature, const TextClassifierState& state, LogitMode mode) {
  const auto d = state.background.size();
  if (feature.size() != d) throw LossError("feature dimension " + std::to_string(feature.size()) +
                                           " does not match classifier dimension " + std::to_string(d));
  if (state.base.cols() != d || (mode == LogitMode::kInference && state.novel.rows() > 0 && state.novel.cols() != d))
    throw LossError("text embeddings do not match classifier dimension");
  if (!(state.temperature > 0.0)) throw LossError("temperature must be positive");
}

}  // namespace

Eigen::VectorXd cosine_logits(const Eigen::VectorXd& feature, const TextClassifierState& state, LogitMode mode) {
  check_dims(feature, state, mode);
  const double pn = feature.norm();
  if (!(pn > 0.0)) throw LossError("cannot classify a zero-norm feature");
  const int k = state.slots(mode);
  Eigen::VectorXd out(k);
  for (int s = 0; s < k; ++s) {
    Eigen::Index len = 0;
    const double* row = slot_row(state, mode, s, len);
    const Eigen::Map<const Eigen::VectorXd> e(row, len);
    const double en = e.norm();
    out[s] = en > 0.0 ? feature.dot(e) / (pn * en) / state.temperature : 0.0;
  }
  return out;
}

void cosine_logits_backward(const Eigen::VectorXd& feature, const TextClassifierState& state, LogitMode mode,
                            const Eigen::VectorXd& d_logits, Eigen::VectorXd& d_feature,
                            Eigen::VectorXd& d_background) {
  check_dims(feature, state, mode);
  const int k = state.slots(mode);
  if (d_logits.size() != k) throw LossError("logit gradient has wrong length");
  if (d_feature.size() != feature.size()) d_feature = Eigen::VectorXd::Zero(feature.size());
  if (d_background.size() != feature.size()) d_background = Eigen::VectorXd::Zero(feature.size());
  const double pn = feature.norm();
  if (!(pn > 0.0)) throw LossError("cannot classify a zero-norm feature");
  const Eigen::VectorXd ph = feature / pn;
  for (int s = 0; s < k; ++s) {
    if (d_logits[s] == 0.0) continue;
    Eigen::Index len = 0;
    const double* row = slot_row(state, mode, s, len);
    const Eigen::Map<const Eigen::VectorXd> e(row, len);
    const double en = e.norm();
    if (!(en > 0.0)) continue;
    const Eigen::VectorXd eh = e / en;
    const double c = ph.dot(eh);
    const double g = d_logits[s] / state.temperature;
    d_feature += g * (eh - c * ph) / pn;
    if (s == k - 1) d_background += g * (ph - c * eh) / en;
  }
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double mx = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - mx).exp();
  return e / e.sum();
}

double classification_loss(const RowMatrix& logits, std::span<const int> labels, RowMatrix* d_logits) {
  const auto n = logits.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw LossError("label count differs from logit rows");
  if (n == 0) throw LossError("classification loss needs at least one proposal");
  if (d_logits) d_logits->setZero(n, logits.cols());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw LossError("label " + std::to_string(y) + " out of range");
    const Eigen::VectorXd row = logits.row(i).transpose();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    sum += lse - row[y];
    if (d_logits) {
      Eigen::VectorXd p = (row.array() - lse).exp();
      p[y] -= 1.0;
      d_logits->row(i) = p.transpose() / static_cast<double>(n);
    }
  }
  return sum / static_cast<double>(n);
}

Eigen::Vector4d semantic_regress(const Eigen::VectorXd& r, const Eigen::VectorXd& embedding,
                                 const SemanticRegressor& head) {
  if (head.weight.rows() != 4 || r.size() + embedding.size() != head.weight.cols())
    throw LossError("semantic regressor expects input of size " + std::to_string(head.weight.cols()) + ", got " +
                    std::to_string(r.size() + embedding.size()));
  const auto dr = r.size();
  return head.weight.leftCols(dr) * r + head.weight.rightCols(embedding.size()) * embedding + head.bias;
}

SemanticRegressGrad semantic_regress_backward(const Eigen::VectorXd& r, const Eigen::VectorXd& embedding,
                                              const SemanticRegressor& head, const Eigen::Vector4d& d_deltas) {
  if (head.weight.rows() != 4 || r.size() + embedding.size() != head.weight.cols())
    throw LossError("semantic regressor input dimension mismatch");
  SemanticRegressGrad g;
  g.d_r = head.weight.leftCols(r.size()).transpose() * d_deltas;
  Eigen::VectorXd x(r.size() + embedding.size());
  x << r, embedding;
  g.d_weight = d_deltas * x.transpose();
  g.d_bias = d_deltas;
  return g;
}

double regression_loss(const RowMatrix& pred, const RowMatrix& targets, RowMatrix* d_pred) {
  if (pred.rows() != targets.rows() || pred.cols() != 4 || targets.cols() != 4)
    throw LossError("regression inputs must be matching K x 4 matrices");
  const auto k = pred.rows();
  if (d_pred) d_pred->setZero(k, 4);
  if (k == 0) return 0.0;
  const RowMatrix diff = pred - targets;
  if (d_pred) *d_pred = diff.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }) / k;
  return diff.cwiseAbs().sum() / static_cast<double>(k);
}

}  // namespace ezsd
