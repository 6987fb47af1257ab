#include "ezsd/nn.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

namespace ezsd::nn {

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<MatF>;
using CMapF = Eigen::Map<const MatF>;

// Aligned copy; products only ever see these, never maps of std::vector storage.
MatF owned(const float* data, Eigen::Index rows, Eigen::Index cols) { return CMapF(data, rows, cols); }

std::size_t product(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::int64_t b) { return a * static_cast<std::size_t>(b); });
}

}  // namespace

Param::Param(std::string name_, std::vector<std::int64_t> shape_, bool decay_)
    : name(std::move(name_)), shape(std::move(shape_)), value(product(shape), 0.0f), grad(value.size(), 0.0f),
      decay(decay_) {}

void init_normal(Param& p, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : p.value) v = static_cast<float>(dist(rng));
}

Conv2d::Conv2d(const std::string& name, int in, int out, int kernel, int stride, int pad)
    : weight(name + ".weight", {out, in, kernel, kernel}),
      bias(name + ".bias", {out}, false),
      in_(in),
      out_(out),
      k_(kernel),
      stride_(stride),
      pad_(pad) {}

Tensor Conv2d::forward(const Tensor& x, Cache* cache) const {
  if (x.c != in_) throw std::invalid_argument("conv " + weight.name + ": expected " + std::to_string(in_) +
                                              " input channels, got " + std::to_string(x.c));
  const int oh = out_size(x.h), ow = out_size(x.w);
  const int rows = in_ * k_ * k_;
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  const std::size_t ncols = ohw * x.n;
  std::vector<float> cols(static_cast<std::size_t>(rows) * ncols, 0.0f);
  for (int c = 0; c < in_; ++c)
    for (int ky = 0; ky < k_; ++ky)
      for (int kx = 0; kx < k_; ++kx) {
        float* row = cols.data() + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * ncols;
        for (int i = 0; i < x.n; ++i) {
          const float* src = x.data() + (static_cast<std::size_t>(i) * x.c + c) * x.h * x.w;
          float* dst = row + i * ohw;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < x.w) dst[oy * ow + ox] = src[iy * x.w + ix];
            }
          }
        }
      }

  const MatF y = owned(weight.value.data(), out_, rows) * owned(cols.data(), rows, static_cast<Eigen::Index>(ncols));
  Tensor out(x.n, out_, oh, ow);
  for (int i = 0; i < x.n; ++i)
    for (int o = 0; o < out_; ++o) {
      const float b = bias.value[o];
      const float* src = y.data() + static_cast<std::size_t>(o) * ncols + i * ohw;
      float* dst = out.data() + (static_cast<std::size_t>(i) * out_ + o) * ohw;
      for (std::size_t p = 0; p < ohw; ++p) dst[p] = src[p] + b;
    }
  if (cache) {
    cache->input_shape = Tensor();
    cache->input_shape.n = x.n;
    cache->input_shape.c = x.c;
    cache->input_shape.h = x.h;
    cache->input_shape.w = x.w;
    cache->cols = std::move(cols);
    cache->oh = oh;
    cache->ow = ow;
  }
  return out;
}

Tensor Conv2d::backward(const Cache& cache, const Tensor& dy, bool need_dx) {
  const int n = cache.input_shape.n;
  const int oh = cache.oh, ow = cache.ow;
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  const std::size_t ncols = ohw * n;
  const int rows = in_ * k_ * k_;
  if (dy.n != n || dy.c != out_ || dy.h != oh || dy.w != ow) throw std::invalid_argument("conv gradient shape mismatch");

  MatF dy_mat(out_, static_cast<Eigen::Index>(ncols));
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < out_; ++o) {
      const float* src = dy.data() + (static_cast<std::size_t>(i) * out_ + o) * ohw;
      std::copy(src, src + ohw, dy_mat.data() + static_cast<std::size_t>(o) * ncols + i * ohw);
    }
  const MatF col_mat = owned(cache.cols.data(), rows, static_cast<Eigen::Index>(ncols));
  MapF(weight.grad.data(), out_, rows) += MatF(dy_mat * col_mat.transpose());
  const Eigen::VectorXf db = dy_mat.rowwise().sum();
  for (int o = 0; o < out_; ++o) bias.grad[o] += db[o];

  Tensor dx;
  if (!need_dx) return dx;
  const MatF dcols = owned(weight.value.data(), out_, rows).transpose() * dy_mat;
  const auto& s = cache.input_shape;
  dx = Tensor(s.n, s.c, s.h, s.w);
  for (int c = 0; c < in_; ++c)
    for (int ky = 0; ky < k_; ++ky)
      for (int kx = 0; kx < k_; ++kx) {
        const float* row = dcols.data() + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * ncols;
        for (int i = 0; i < n; ++i) {
          float* dst = dx.data() + (static_cast<std::size_t>(i) * s.c + c) * s.h * s.w;
          const float* src = row + i * ohw;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < s.w) dst[iy * s.w + ix] += src[oy * ow + ox];
            }
          }
        }
      }
  return dx;
}

Linear::Linear(const std::string& name, int in, int out)
    : weight(name + ".weight", {out, in}), bias(name + ".bias", {out}, false), in_(in), out_(out) {}

std::vector<float> Linear::forward(std::span<const float> x, int rows) const {
  if (x.size() != static_cast<std::size_t>(rows) * in_)
    throw std::invalid_argument("linear " + weight.name + ": input size mismatch");
  std::vector<float> y(static_cast<std::size_t>(rows) * out_);
  MatF ym = owned(x.data(), rows, in_) * owned(weight.value.data(), out_, in_).transpose();
  ym.rowwise() += Eigen::RowVectorXf(Eigen::Map<const Eigen::RowVectorXf>(bias.value.data(), out_));
  MapF(y.data(), rows, out_) = ym;
  return y;
}

std::vector<float> Linear::backward(std::span<const float> x, std::span<const float> dy, int rows, bool need_dx) {
  const MatF dym = owned(dy.data(), rows, out_);
  MapF(weight.grad.data(), out_, in_) += MatF(dym.transpose() * owned(x.data(), rows, in_));
  Eigen::Map<Eigen::RowVectorXf>(bias.grad.data(), out_) += Eigen::RowVectorXf(dym.colwise().sum());
  std::vector<float> dx;
  if (!need_dx) return dx;
  dx.resize(static_cast<std::size_t>(rows) * in_);
  MapF(dx.data(), rows, in_) = MatF(dym * owned(weight.value.data(), out_, in_));
  return dx;
}

void relu_inplace(std::span<float> x) {
  for (auto& v : x) v = v > 0.0f ? v : 0.0f;
}

void relu_backward(std::span<const float> y, std::span<float> dy) {
  for (std::size_t i = 0; i < y.size(); ++i)
    if (!(y[i] > 0.0f)) dy[i] = 0.0f;
}

namespace {

struct Tap {
  int y0, x0, y1, x1;
  float w00, w01, w10, w11;
  bool valid;
};

Tap bilinear_tap(double y, double x, int h, int w) {
  Tap t{0, 0, 0, 0, 0, 0, 0, 0, false};
  if (y < -1.0 || y > h || x < -1.0 || x > w) return t;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  int y1, x1;
  if (y0 >= h - 1) {
    y0 = y1 = h - 1;
    y = y0;
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= w - 1) {
    x0 = x1 = w - 1;
    x = x0;
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - y0, lx = x - x0, hy = 1.0 - ly, hx = 1.0 - lx;
  t = {y0, x0, y1, x1, static_cast<float>(hy * hx), static_cast<float>(hy * lx), static_cast<float>(ly * hx),
       static_cast<float>(ly * lx), true};
  return t;
}

template <typename Visit>
void for_each_tap(const RoiAlign& ra, const Box& b, int h, int w, Visit&& visit) {
  const double sx = b.x1 * ra.spatial_scale - 0.5, sy = b.y1 * ra.spatial_scale - 0.5;
  const double rw = std::max((b.x2 - b.x1) * ra.spatial_scale, 1e-6);
  const double rh = std::max((b.y2 - b.y1) * ra.spatial_scale, 1e-6);
  const double bw = rw / ra.pooled, bh = rh / ra.pooled;
  const int sr = ra.sampling_ratio;
  const float inv = 1.0f / static_cast<float>(sr * sr);
  for (int py = 0; py < ra.pooled; ++py)
    for (int px = 0; px < ra.pooled; ++px)
      for (int iy = 0; iy < sr; ++iy)
        for (int ix = 0; ix < sr; ++ix) {
          const double y = sy + py * bh + (iy + 0.5) * bh / sr;
          const double x = sx + px * bw + (ix + 0.5) * bw / sr;
          const Tap t = bilinear_tap(y, x, h, w);
          if (t.valid) visit(py * ra.pooled + px, t, inv);
        }
}

}  // namespace

Tensor RoiAlign::forward(const Tensor& feature, std::span<const Box> boxes) const {
  if (feature.n != 1) throw std::invalid_argument("RoiAlign expects a single-image feature map");
  Tensor out(static_cast<int>(boxes.size()), feature.c, pooled, pooled);
  const std::size_t hw = static_cast<std::size_t>(feature.h) * feature.w;
  const std::size_t pp = static_cast<std::size_t>(pooled) * pooled;
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    for_each_tap(*this, boxes[r], feature.h, feature.w, [&](int bin, const Tap& t, float inv) {
      for (int c = 0; c < feature.c; ++c) {
        const float* f = feature.data() + c * hw;
        const float v = t.w00 * f[t.y0 * feature.w + t.x0] + t.w01 * f[t.y0 * feature.w + t.x1] +
                        t.w10 * f[t.y1 * feature.w + t.x0] + t.w11 * f[t.y1 * feature.w + t.x1];
        out.v[(r * feature.c + c) * pp + bin] += v * inv;
      }
    });
  }
  return out;
}

void RoiAlign::backward(const Tensor& feature, std::span<const Box> boxes, const Tensor& d_pooled,
                        Tensor& d_feature) const {
  if (d_feature.size() != feature.size()) {
    d_feature = Tensor(feature.n, feature.c, feature.h, feature.w);
  }
  const std::size_t hw = static_cast<std::size_t>(feature.h) * feature.w;
  const std::size_t pp = static_cast<std::size_t>(pooled) * pooled;
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    for_each_tap(*this, boxes[r], feature.h, feature.w, [&](int bin, const Tap& t, float inv) {
      for (int c = 0; c < feature.c; ++c) {
        const float g = d_pooled.v[(r * feature.c + c) * pp + bin] * inv;
        if (g == 0.0f) continue;
        float* f = d_feature.data() + c * hw;
        f[t.y0 * feature.w + t.x0] += t.w00 * g;
        f[t.y0 * feature.w + t.x1] += t.w01 * g;
        f[t.y1 * feature.w + t.x0] += t.w10 * g;
        f[t.y1 * feature.w + t.x1] += t.w11 * g;
      }
    });
  }
}

double Sgd::step(const SgdConfig& cfg, double lr) {
  if (velocity_.empty())
    for (const Param* p : params_) velocity_.emplace_back(p->numel(), 0.0f);
  double sq = 0.0;
  for (const Param* p : params_)
    for (float g : p->grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  const float scale = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? static_cast<float>(cfg.grad_clip / norm) : 1.0f;
  const auto m = static_cast<float>(cfg.momentum);
  const auto wd = static_cast<float>(cfg.weight_decay);
  const auto step = static_cast<float>(lr);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    auto& vel = velocity_[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      float g = p.grad[i] * scale;
      if (p.decay) g += wd * p.value[i];
      vel[i] = m * vel[i] + g;
      p.value[i] -= step * vel[i];
    }
  }
  return norm;
}

}  // namespace ezsd::nn
