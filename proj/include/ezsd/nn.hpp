#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ezsd/geometry.hpp"

namespace ezsd::nn {

// NCHW float tensor.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_) {}

  std::size_t size() const { return v.size(); }
  float* data() { return v.data(); }
  const float* data() const { return v.data(); }
  float& at(int i, int ch, int y, int x) { return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
  float at(int i, int ch, int y, int x) const { return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
};

struct Param {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool decay = true;  // subject to weight decay

  Param() = default;
  Param(std::string name_, std::vector<std::int64_t> shape_, bool decay_ = true);
  std::size_t numel() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

// Kaiming-style normal init with the given std; bias-like params stay zero.
void init_normal(Param& p, double std, std::mt19937_64& rng);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, int stride, int pad);

  struct Cache {
    Tensor input_shape;  // dims only
    std::vector<float> cols;
    int oh = 0, ow = 0;
  };

  Tensor forward(const Tensor& x, Cache* cache) const;
  // Accumulates parameter gradients; returns dL/dx when need_dx.
  Tensor backward(const Cache& cache, const Tensor& dy, bool need_dx);

  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }
  std::vector<Param*> params() { return {&weight, &bias}; }

  Param weight, bias;

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out);

  // x: rows x in (row-major); returns rows x out.
  std::vector<float> forward(std::span<const float> x, int rows) const;
  std::vector<float> backward(std::span<const float> x, std::span<const float> dy, int rows, bool need_dx);

  int in() const { return in_; }
  int out() const { return out_; }
  std::vector<Param*> params() { return {&weight, &bias}; }

  Param weight, bias;  // weight: out x in

 private:
  int in_ = 0, out_ = 0;
};

void relu_inplace(std::span<float> x);
// dy *= (y > 0), y being the ReLU output.
void relu_backward(std::span<const float> y, std::span<float> dy);

// RoIAlign over a single-image feature map (n == 1). Boxes are in input-image
// pixels; spatial_scale maps them to feature cells. Each output bin averages
// sampling_ratio^2 bilinear samples (half-pixel aligned).
struct RoiAlign {
  int pooled = 7;
  double spatial_scale = 0.125;
  int sampling_ratio = 2;

  Tensor forward(const Tensor& feature, std::span<const Box> boxes) const;
  // Accumulates into d_feature (same dims as feature).
  void backward(const Tensor& feature, std::span<const Box> boxes, const Tensor& d_pooled, Tensor& d_feature) const;
};

struct SgdConfig {
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 0.0;  // global norm; 0 disables
};

class Sgd {
 public:
  explicit Sgd(std::vector<Param*> params) : params_(std::move(params)) {}
  // Returns the pre-clip global gradient norm.
  double step(const SgdConfig& cfg, double lr);

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<float>> velocity_;
};

}  // namespace ezsd::nn
