#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ezsd/losses.hpp"

namespace ezsd::testing {

// Norm-wise relative error between an analytic gradient and its central
// finite-difference estimate.
inline double gradient_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

template <typename F>
Eigen::VectorXd numeric_gradient(F&& f, Eigen::VectorXd x, double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Eigen::VectorXd flatten(const RowMatrix& m) { return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size()); }

inline RowMatrix unflatten(const Eigen::VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const RowMatrix>(v.data(), rows, cols);
}

// Random point with every |c - c'| coordinate at least 1e-2 away from a tie.
struct DistillPoint {
  RowMatrix model, clip;
  std::vector<double> weights;
};

inline DistillPoint random_distill_point(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> m(1, 6), d(1, 8);
  std::uniform_real_distribution<double> u(-1, 1), w(0.05, 1.0), gap(1e-2, 1.0);
  DistillPoint p;
  const int M = m(rng), D = d(rng);
  p.model.resize(M, D);
  p.clip.resize(M, D);
  for (int i = 0; i < M; ++i) {
    p.weights.push_back(w(rng));
    for (int j = 0; j < D; ++j) {
      p.model(i, j) = u(rng);
      p.clip(i, j) = p.model(i, j) + (u(rng) < 0 ? -1 : 1) * gap(rng);
    }
  }
  return p;
}

inline double distill_gradient_error(const DistillPoint& p) {
  RowMatrix grad;
  distillation_loss(p.model, p.clip, p.weights, &grad);
  auto f = [&](const Eigen::VectorXd& x) {
    return distillation_loss(unflatten(x, p.model.rows(), p.model.cols()), p.clip, p.weights);
  };
  return gradient_error(flatten(grad), numeric_gradient(f, flatten(p.model), 1e-6));
}

struct ClassifyPoint {
  TextClassifierState state;
  RowMatrix features;  // N x D
  std::vector<int> labels;
  LogitMode mode = LogitMode::kTrain;
};

inline ClassifyPoint random_classify_point(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n(1, 4), nb(1, 4), nn(0, 3), d(2, 8);
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> logt(std::log(0.01), 0.0);
  ClassifyPoint p;
  const int D = d(rng), B = nb(rng), K = nn(rng), N = n(rng);
  p.mode = rng() % 2 ? LogitMode::kTrain : LogitMode::kInference;
  p.state.base = RowMatrix::NullaryExpr(B, D, [&] { return g(rng); });
  p.state.novel = RowMatrix::NullaryExpr(K, D, [&] { return g(rng); });
  p.state.background = Eigen::VectorXd::NullaryExpr(D, [&] { return g(rng); });
  p.state.temperature = std::exp(logt(rng));
  p.features = RowMatrix::NullaryExpr(N, D, [&] { return g(rng); });
  // Cosines are singular at the origin; keep feature and BG norms in [0.5, 2].
  std::uniform_real_distribution<double> norm(0.5, 2.0);
  for (Eigen::Index i = 0; i < N; ++i) p.features.row(i) *= norm(rng) / p.features.row(i).norm();
  p.state.background *= norm(rng) / p.state.background.norm();
  std::uniform_int_distribution<int> label(0, p.state.slots(p.mode) - 1);
  for (int i = 0; i < N; ++i) p.labels.push_back(label(rng));
  return p;
}

inline double classification_objective(const RowMatrix& features, const TextClassifierState& state, LogitMode mode,
                                       const std::vector<int>& labels) {
  RowMatrix logits(features.rows(), state.slots(mode));
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    logits.row(i) = cosine_logits(features.row(i).transpose(), state, mode).transpose();
  return classification_loss(logits, labels);
}

// Gradient error w.r.t. the stacked (features, background) vector.
inline double classify_gradient_error(const ClassifyPoint& p) {
  const auto N = p.features.rows(), D = p.features.cols();
  RowMatrix logits(N, p.state.slots(p.mode));
  for (Eigen::Index i = 0; i < N; ++i)
    logits.row(i) = cosine_logits(p.features.row(i).transpose(), p.state, p.mode).transpose();
  RowMatrix d_logits;
  classification_loss(logits, p.labels, &d_logits);
  RowMatrix d_features(N, D);
  Eigen::VectorXd d_bg = Eigen::VectorXd::Zero(D);
  for (Eigen::Index i = 0; i < N; ++i) {
    Eigen::VectorXd df = Eigen::VectorXd::Zero(D);
    cosine_logits_backward(p.features.row(i).transpose(), p.state, p.mode, d_logits.row(i).transpose(), df, d_bg);
    d_features.row(i) = df.transpose();
  }
  Eigen::VectorXd analytic(N * D + D);
  analytic << flatten(d_features), d_bg;
  Eigen::VectorXd x0(N * D + D);
  x0 << flatten(p.features), p.state.background;
  auto f = [&](const Eigen::VectorXd& x) {
    TextClassifierState s = p.state;
    s.background = x.tail(D);
    return classification_objective(unflatten(x.head(N * D), N, D), s, p.mode, p.labels);
  };
  return gradient_error(analytic, numeric_gradient(f, x0, 1e-5));
}

struct RegressPoint {
  SemanticRegressor head;
  RowMatrix r;           // K x d_r
  RowMatrix embeddings;  // K x D (assigned class embedding per row)
  RowMatrix targets;     // K x 4
};

inline RegressPoint random_regress_point(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> k(1, 4), dr(1, 6), d(1, 6);
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> gap(1e-2, 1.0);
  RegressPoint p;
  const int K = k(rng), DR = dr(rng), D = d(rng);
  p.head.weight = Eigen::MatrixXd::NullaryExpr(4, DR + D, [&] { return g(rng); });
  p.head.bias = Eigen::Vector4d::NullaryExpr([&] { return g(rng); });
  p.r = RowMatrix::NullaryExpr(K, DR, [&] { return g(rng); });
  p.embeddings = RowMatrix::NullaryExpr(K, D, [&] { return g(rng); });
  p.targets.resize(K, 4);
  for (int i = 0; i < K; ++i) {
    const Eigen::Vector4d out = semantic_regress(p.r.row(i).transpose(), p.embeddings.row(i).transpose(), p.head);
    for (int j = 0; j < 4; ++j) p.targets(i, j) = out[j] + (g(rng) < 0 ? -1 : 1) * gap(rng);
  }
  return p;
}

inline double regress_objective(const RegressPoint& p, const RowMatrix& r, const SemanticRegressor& head) {
  RowMatrix pred(r.rows(), 4);
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    pred.row(i) = semantic_regress(r.row(i).transpose(), p.embeddings.row(i).transpose(), head).transpose();
  return regression_loss(pred, p.targets);
}

// Gradient error w.r.t. the stacked (r, weight, bias) vector.
inline double regress_gradient_error(const RegressPoint& p) {
  const auto K = p.r.rows(), DR = p.r.cols();
  RowMatrix pred(K, 4);
  for (Eigen::Index i = 0; i < K; ++i)
    pred.row(i) = semantic_regress(p.r.row(i).transpose(), p.embeddings.row(i).transpose(), p.head).transpose();
  RowMatrix d_pred;
  regression_loss(pred, p.targets, &d_pred);
  RowMatrix d_r(K, DR);
  Eigen::MatrixXd d_w = Eigen::MatrixXd::Zero(4, p.head.weight.cols());
  Eigen::Vector4d d_b = Eigen::Vector4d::Zero();
  for (Eigen::Index i = 0; i < K; ++i) {
    const auto g = semantic_regress_backward(p.r.row(i).transpose(), p.embeddings.row(i).transpose(), p.head,
                                             d_pred.row(i).transpose());
    d_r.row(i) = g.d_r.transpose();
    d_w += g.d_weight;
    d_b += g.d_bias;
  }
  const auto nw = d_w.size();
  Eigen::VectorXd analytic(K * DR + nw + 4);
  analytic << flatten(d_r), Eigen::Map<const Eigen::VectorXd>(d_w.data(), nw), d_b;
  Eigen::VectorXd x0(K * DR + nw + 4);
  x0 << flatten(p.r), Eigen::Map<const Eigen::VectorXd>(p.head.weight.data(), nw), p.head.bias;
  auto f = [&](const Eigen::VectorXd& x) {
    SemanticRegressor h = p.head;
    h.weight = Eigen::Map<const Eigen::MatrixXd>(x.data() + K * DR, 4, p.head.weight.cols());
    h.bias = x.tail(4);
    return regress_objective(p, unflatten(x.head(K * DR), K, DR), h);
  };
  return gradient_error(analytic, numeric_gradient(f, x0, 1e-6));
}

}  // namespace ezsd::testing
