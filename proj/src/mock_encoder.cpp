#include <algorithm>
#include <cmath>
#include <random>

#include "ezsd/dataset.hpp"
#include "ezsd/encoder.hpp"
#include "ezsd/util.hpp"

namespace ezsd {

namespace {

constexpr double kPaletteSigma2x2 = 2.0 * 0.12 * 0.12;
constexpr double kNormEps = 1e-5;
constexpr int kPrototypeCanvas = 48;
constexpr int kPrototypeSide = 40;

// Layer normalization without the affine part.
std::vector<double> standardize(std::span<const double> x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + kNormEps);
  std::vector<double> z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - mean) * inv;
  return z;
}

class MockNormTrainable : public NormTrainable {
 public:
  explicit MockNormTrainable(const MockEncoder& enc) : enc_(enc) {
    const auto& g = enc.norm_gain();
    const auto& b = enc.norm_bias();
    values_.assign(g.begin(), g.end());
    values_.insert(values_.end(), b.begin(), b.end());
    for (const auto& p : enc.parameters())
      if (p.array.name == "projection.weight") projection_ = p.array.data;
  }

  std::vector<double> values() const override { return values_; }

  void set_values(std::span<const double> v) override {
    if (v.size() != values_.size()) throw EncoderError("normalization parameter count mismatch");
    values_.assign(v.begin(), v.end());
  }

  std::vector<double> prepare(const CropTensor& crop) const override { return standardize(enc_.descriptor(crop)); }

  std::vector<double> forward(std::span<const double> z) const override {
    constexpr int K = MockEncoder::kDescriptorSize;
    std::vector<double> y(K);
    for (int k = 0; k < K; ++k) y[k] = values_[k] * z[k] + values_[K + k];
    std::vector<double> f(enc_.dim(), 0.0);
    for (int d = 0; d < enc_.dim(); ++d)
      for (int k = 0; k < K; ++k) f[d] += static_cast<double>(projection_[d * K + k]) * y[k];
    return f;
  }

  void backward(std::span<const double> z, std::span<const double> df, std::span<double> dvalues) const override {
    constexpr int K = MockEncoder::kDescriptorSize;
    for (int k = 0; k < K; ++k) {
      double dy = 0.0;
      for (int d = 0; d < enc_.dim(); ++d) dy += static_cast<double>(projection_[d * K + k]) * df[d];
      dvalues[k] += dy * z[k];
      dvalues[K + k] += dy;
    }
  }

  std::unique_ptr<Encoder> build() const override {
    constexpr int K = MockEncoder::kDescriptorSize;
    auto out = std::make_unique<MockEncoder>(enc_);
    std::vector<float> gain(K), bias(K);
    for (int k = 0; k < K; ++k) {
      gain[k] = static_cast<float>(values_[k]);
      bias[k] = static_cast<float>(values_[K + k]);
    }
    out->set_normalization(std::move(gain), std::move(bias));
    return out;
  }

 private:
  const MockEncoder& enc_;
  std::vector<double> values_;
  std::vector<float> projection_;
};

}  // namespace

MockEncoder::MockEncoder(const MockEncoderConfig& cfg) : cfg_(cfg) {
  if (cfg.dim <= 0 || cfg.input_side <= 0) throw EncoderError("mock encoder dims must be positive");
  palette_ = {0.5f, 0.5f, 0.5f};
  for (const auto& [name, rgb] : toy_color_table()) {
    palette_.push_back(static_cast<float>(rgb.r));
    palette_.push_back(static_cast<float>(rgb.g));
    palette_.push_back(static_cast<float>(rgb.b));
  }
  if (palette_.size() != static_cast<std::size_t>(kPaletteSize) * 3)
    throw EncoderError("mock palette size disagrees with the toy color table");

  std::mt19937_64 rng(derive_seed(cfg.seed, "mock.projection"));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(kDescriptorSize)));
  projection_.resize(static_cast<std::size_t>(cfg.dim) * kDescriptorSize);
  for (float& w : projection_) w = static_cast<float>(normal(rng));
  gain_.assign(kDescriptorSize, 1.0f);
  bias_.assign(kDescriptorSize, 0.0f);
}

std::vector<double> MockEncoder::descriptor(const CropTensor& crop) const {
  const ChannelNorm norm = channel_norm();
  const std::size_t plane = static_cast<std::size_t>(crop.side) * crop.side;
  if (crop.chw.size() != 3 * plane) throw EncoderError("crop tensor has the wrong size");

  std::vector<double> hist(kPaletteSize, 0.0);
  double valid = 0.0;
  double m00 = 0.0, m10 = 0.0, m01 = 0.0;
  std::vector<double> fg(plane, 0.0);
  double a[kPaletteSize];
  for (std::size_t p = 0; p < plane; ++p) {
    double rgb[3];
    for (int c = 0; c < 3; ++c) rgb[c] = crop.chw[c * plane + p] * norm.std[c] + norm.mean[c];
    double total = 0.0;
    for (int k = 0; k < kPaletteSize; ++k) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double diff = rgb[c] - palette_[k * 3 + c];
        d2 += diff * diff;
      }
      a[k] = std::exp(-d2 / kPaletteSigma2x2);
      total += a[k];
    }
    if (total < 1e-6) continue;  // zero padding and colors far from the palette
    valid += 1.0;
    for (int k = 0; k < kPaletteSize; ++k) hist[k] += a[k] / total;
    fg[p] = 1.0 - a[0] / total;
    const double x = static_cast<double>(p % crop.side) + 0.5;
    const double y = static_cast<double>(p / crop.side) + 0.5;
    m00 += fg[p];
    m10 += fg[p] * x;
    m01 += fg[p] * y;
  }

  std::vector<double> desc(kDescriptorSize, 0.0);
  if (valid == 0.0) {
    std::fill(desc.begin(), desc.begin() + kPaletteSize, 1.0 / kPaletteSize);
    return desc;
  }
  for (int k = 0; k < kPaletteSize; ++k) desc[k] = hist[k] / valid;
  desc[kPaletteSize] = m00 / valid;  // foreground fill
  if (m00 > 1e-3) {
    const double cx = m10 / m00, cy = m01 / m00;
    double mu20 = 0.0, mu02 = 0.0, mu03 = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      if (fg[p] == 0.0) continue;
      const double dx = static_cast<double>(p % crop.side) + 0.5 - cx;
      const double dy = static_cast<double>(p / crop.side) + 0.5 - cy;
      mu20 += fg[p] * dx * dx;
      mu02 += fg[p] * dy * dy;
      mu03 += fg[p] * dy * dy * dy;
    }
    // Normalized polar inertia: 1/(2*pi) for a disk, 1/6 for a square.
    desc[kPaletteSize + 1] = 5.0 * ((mu20 + mu02) / (m00 * m00) - 1.0 / (2.0 * M_PI));
    if (mu02 > 1e-9) desc[kPaletteSize + 2] = 0.2 * std::clamp(mu03 / std::pow(mu02, 1.5), -2.0, 2.0);
  }
  return desc;
}

std::vector<double> MockEncoder::project(std::span<const double> desc, std::span<const float> gain,
                                         std::span<const float> bias) const {
  const auto z = standardize(desc);
  std::vector<double> y(kDescriptorSize);
  for (int k = 0; k < kDescriptorSize; ++k) y[k] = gain[k] * z[k] + bias[k];
  std::vector<double> f(cfg_.dim, 0.0);
  for (int d = 0; d < cfg_.dim; ++d)
    for (int k = 0; k < kDescriptorSize; ++k) f[d] += static_cast<double>(projection_[d * kDescriptorSize + k]) * y[k];
  return f;
}

FeatureVector MockEncoder::encode(const CropTensor& crop) const {
  const auto f = project(descriptor(crop), gain_, bias_);
  return FeatureVector(f.begin(), f.end());
}

std::vector<float> MockEncoder::encode_prompt(const std::string& /*prompt*/, const std::string& name) const {
  if (const auto cat = parse_toy_category(name)) {
    const Image proto = render_prototype(*cat, kPrototypeCanvas, kPrototypeSide);
    const double off = 0.5 * (kPrototypeCanvas - kPrototypeSide);
    const Box shape{off, off, off + kPrototypeSide, off + kPrototypeSide};
    const Box crop_box = enlarge(shape, 1.2, Box{0, 0, double(kPrototypeCanvas), double(kPrototypeCanvas)});
    const auto desc = descriptor(crop_and_preprocess(proto, crop_box, cfg_.input_side, channel_norm()));
    const std::vector<float> unit(kDescriptorSize, 1.0f), zero(kDescriptorSize, 0.0f);
    const auto f = project(desc, unit, zero);
    return std::vector<float>(f.begin(), f.end());
  }
  std::mt19937_64 rng(derive_seed(cfg_.seed, "mock.text", fnv1a64(name)));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> v(cfg_.dim);
  for (float& x : v) x = static_cast<float>(normal(rng));
  return v;
}

std::vector<EncoderParameter> MockEncoder::parameters() const {
  const std::int64_t K = kDescriptorSize;
  return {
      {{"norm.gain", {K}, gain_}, true},
      {{"norm.bias", {K}, bias_}, true},
      {{"projection.weight", {cfg_.dim, K}, projection_}, false},
      {{"palette", {kPaletteSize, 3}, palette_}, false},
  };
}

std::unique_ptr<NormTrainable> MockEncoder::norm_trainable() const { return std::make_unique<MockNormTrainable>(*this); }

nlohmann::json MockEncoder::describe() const {
  return {{"kind", "mock"}, {"seed", cfg_.seed}, {"dim", cfg_.dim}, {"input_side", cfg_.input_side}};
}

void MockEncoder::set_normalization(std::vector<float> gain, std::vector<float> bias) {
  if (gain.size() != static_cast<std::size_t>(kDescriptorSize) || bias.size() != gain.size())
    throw EncoderError("normalization parameters must have descriptor size");
  gain_ = std::move(gain);
  bias_ = std::move(bias);
}

void MockEncoder::load_parameters(const std::vector<NamedArray>& arrays) {
  auto take = [&](const std::string& name, std::vector<float>& dst) {
    for (const auto& a : arrays) {
      if (a.name != name) continue;
      if (a.data.size() != dst.size()) throw EncoderError("parameter '" + name + "' has the wrong size");
      dst = a.data;
      return;
    }
    throw EncoderError("encoder checkpoint lacks parameter '" + name + "'");
  };
  take("norm.gain", gain_);
  take("norm.bias", bias_);
  take("projection.weight", projection_);
  take("palette", palette_);
}

}  // namespace ezsd
