#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace ezsd {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Rows are proposals, columns feature coordinates.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// (1/M) * sum_i o_i * |c_i - c'_i|_1. M = 0 yields 0. When `d_model` is given
// it receives dL/dc' (subgradient 0 at exact ties).
double distillation_loss(const RowMatrix& model_feats, const RowMatrix& clip_feats, std::span<const double> weights,
                         RowMatrix* d_model = nullptr);

enum class LogitMode { kTrain, kInference };

struct TextClassifierState {
  RowMatrix base;   // n x D, fixed
  RowMatrix novel;  // k x D, inference only
  Eigen::VectorXd background;
  double temperature = 0.01;

  int dim() const { return static_cast<int>(background.size()); }
  // Slot count for the given mode, BG included.
  int slots(LogitMode mode) const;
  int background_slot(LogitMode mode) const { return slots(mode) - 1; }
};

// Train: [cos(p,B_1..n), cos(p,BG)] / tau. Inference: [B.., N.., BG] / tau.
Eigen::VectorXd cosine_logits(const Eigen::VectorXd& feature, const TextClassifierState& state, LogitMode mode);

// Vector-Jacobian product of cosine_logits; accumulates into d_feature and d_background.
void cosine_logits_backward(const Eigen::VectorXd& feature, const TextClassifierState& state, LogitMode mode,
                            const Eigen::VectorXd& d_logits, Eigen::VectorXd& d_feature,
                            Eigen::VectorXd& d_background);

// Mean cross-entropy of softmax(logits row) against labels.
double classification_loss(const RowMatrix& logits, std::span<const int> labels, RowMatrix* d_logits = nullptr);

// Numerically stable softmax of one logit vector.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

// Output map of the semantic regressor: deltas = W * Cat(r, embedding) + b.
struct SemanticRegressor {
  Eigen::MatrixXd weight;  // 4 x (d_r + D)
  Eigen::Vector4d bias = Eigen::Vector4d::Zero();

  int input_dim() const { return static_cast<int>(weight.cols()); }
};

Eigen::Vector4d semantic_regress(const Eigen::VectorXd& r, const Eigen::VectorXd& embedding,
                                 const SemanticRegressor& head);

struct SemanticRegressGrad {
  Eigen::VectorXd d_r;
  Eigen::MatrixXd d_weight;
  Eigen::Vector4d d_bias = Eigen::Vector4d::Zero();
};

// Gradients of <d_deltas, semantic_regress(r, embedding)>.
SemanticRegressGrad semantic_regress_backward(const Eigen::VectorXd& r, const Eigen::VectorXd& embedding,
                                              const SemanticRegressor& head, const Eigen::Vector4d& d_deltas);

// (1/K) * sum_i |pred_i - target_i|_1 over K x 4 rows. K = 0 yields 0.
double regression_loss(const RowMatrix& pred, const RowMatrix& targets, RowMatrix* d_pred = nullptr);

struct LossBreakdown {
  double dist = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double rpn_obj = 0.0;
  double rpn_reg = 0.0;

  // Head objective; RPN terms are tracked separately.
  double total() const { return dist + cls + reg; }
};

}  // namespace ezsd
