#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ezsd/checkpoint.hpp"
#include "ezsd/geometry.hpp"
#include "ezsd/image.hpp"

namespace ezsd {

class EncoderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using FeatureVector = std::vector<float>;

struct TextEmbedding {
  std::string category_name;
  std::vector<float> values;
};

struct ChannelNorm {
  // Defaults are the CLIP image preprocessing statistics.
  float mean[3] = {0.48145466f, 0.4578275f, 0.40821073f};
  float std[3] = {0.26862954f, 0.26130258f, 0.27577711f};
};

// Square preprocessed crop, CHW, channel-normalized.
struct CropTensor {
  int side = 0;
  std::vector<float> chw;
};

// Rasterizes `box` (floor/ceil to the pixel grid, clipped to the image) and
// zero-pads the shorter side to a square; padding is split evenly with the
// odd pixel going to the bottom/right.
Image extract_padded_square(const Image& image, const Box& box);

// extract_padded_square, bilinear resize to side x side, then channel normalization.
CropTensor crop_and_preprocess(const Image& image, const Box& box, int input_side,
                               const ChannelNorm& norm = {});

std::string format_prompt(const std::string& prompt_template, const std::string& name);

// One named parameter array and whether it belongs to the normalization partition.
struct EncoderParameter {
  NamedArray array;
  bool normalization = false;
};

class NormTrainable;

// Vision-language encoder. Implementations are immutable; adaptation returns a new encoder.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual int dim() const = 0;
  virtual int input_side() const = 0;
  virtual ChannelNorm channel_norm() const { return {}; }
  virtual FeatureVector encode(const CropTensor& crop) const = 0;
  // `prompt` is the template-expanded text; `name` the bare category name.
  virtual std::vector<float> encode_prompt(const std::string& prompt, const std::string& name) const = 0;
  virtual std::vector<EncoderParameter> parameters() const = 0;
  // nullptr when the encoder exposes no normalization partition.
  virtual std::unique_ptr<NormTrainable> norm_trainable() const { return nullptr; }
  // Enough to rebuild the encoder together with parameters().
  virtual nlohmann::json describe() const = 0;
};

// Gradient access to the normalization partition of an encoder. Crops are
// first reduced by the frozen part of the network (`prepare`), after which
// features and vector-Jacobian products depend only on the trainable values.
class NormTrainable {
 public:
  virtual ~NormTrainable() = default;
  virtual std::vector<double> values() const = 0;
  virtual void set_values(std::span<const double> values) = 0;
  virtual std::vector<double> prepare(const CropTensor& crop) const = 0;
  virtual std::vector<double> forward(std::span<const double> prepared) const = 0;
  // Accumulates dL/dvalues given dL/dfeature.
  virtual void backward(std::span<const double> prepared, std::span<const double> dfeature,
                        std::span<double> dvalues) const = 0;
  virtual std::unique_ptr<Encoder> build() const = 0;
};

FeatureVector encode_image_region(const Encoder& enc, const Image& image, const Box& box);
std::vector<FeatureVector> encode_image_regions(const Encoder& enc, const Image& image,
                                                std::span<const Box> boxes, int workers = 1);
std::vector<TextEmbedding> encode_text(const Encoder& enc, const std::vector<std::string>& names,
                                       const std::string& prompt_template = "a photo of a {name}");

struct Classification {
  int pred = 0;
  std::vector<double> cosines;
  std::vector<double> scores;  // softmax(cosines / temperature)
};

// Cosine similarity on L2-normalized operands, scaled by 1/temperature, softmax.
// Ties resolve to the lower index.
Classification classify_feature(std::span<const float> feature, std::span<const TextEmbedding> embeddings,
                                double temperature = 0.01);

// ---- Mock encoder ---------------------------------------------------------

struct MockEncoderConfig {
  std::uint64_t seed = 0;
  int dim = 32;
  int input_side = 32;
};

// Deterministic stand-in for a pretrained model. A crop is summarized by a
// soft color histogram over a fixed palette plus three foreground shape
// moments; the descriptor passes through a layer normalization (gain, bias:
// the normalization partition) and a frozen seeded projection to D dims.
// Text for "<color>_<shape>" names embeds the prototype rendering of that
// shape through the reference normalization (unit gain, zero bias); other
// names map to seeded random vectors.
class MockEncoder : public Encoder {
 public:
  explicit MockEncoder(const MockEncoderConfig& cfg);

  static constexpr int kPaletteSize = 9;
  static constexpr int kDescriptorSize = kPaletteSize + 3;

  int dim() const override { return cfg_.dim; }
  int input_side() const override { return cfg_.input_side; }
  FeatureVector encode(const CropTensor& crop) const override;
  std::vector<float> encode_prompt(const std::string& prompt, const std::string& name) const override;
  std::vector<EncoderParameter> parameters() const override;
  std::unique_ptr<NormTrainable> norm_trainable() const override;
  nlohmann::json describe() const override;

  const MockEncoderConfig& config() const { return cfg_; }
  std::vector<double> descriptor(const CropTensor& crop) const;
  std::vector<double> project(std::span<const double> descriptor, std::span<const float> gain,
                              std::span<const float> bias) const;

  const std::vector<float>& norm_gain() const { return gain_; }
  const std::vector<float>& norm_bias() const { return bias_; }
  void set_normalization(std::vector<float> gain, std::vector<float> bias);
  void load_parameters(const std::vector<NamedArray>& arrays);

 private:
  MockEncoderConfig cfg_;
  std::vector<float> palette_;     // kPaletteSize x 3
  std::vector<float> projection_;  // dim x kDescriptorSize
  std::vector<float> gain_;        // kDescriptorSize
  std::vector<float> bias_;        // kDescriptorSize
};

// ---- Plugin encoder -------------------------------------------------------

// Adapter for an external model packaged as a shared library exporting:
//   int ezsd_plugin_dim(void);
//   int ezsd_plugin_input_side(void);
//   int ezsd_plugin_encode_image(const float* chw, int side, float* out);
//   int ezsd_plugin_encode_text(const char* prompt, float* out);
// and optionally void ezsd_plugin_channel_norm(float* mean3, float* std3).
// Non-zero returns signal failure. Plugins expose no trainable partition.
class PluginEncoder : public Encoder {
 public:
  explicit PluginEncoder(const std::filesystem::path& library);
  ~PluginEncoder() override;
  PluginEncoder(const PluginEncoder&) = delete;
  PluginEncoder& operator=(const PluginEncoder&) = delete;

  int dim() const override { return dim_; }
  int input_side() const override { return side_; }
  ChannelNorm channel_norm() const override { return norm_; }
  FeatureVector encode(const CropTensor& crop) const override;
  std::vector<float> encode_prompt(const std::string& prompt, const std::string& name) const override;
  std::vector<EncoderParameter> parameters() const override { return {}; }
  nlohmann::json describe() const override;

 private:
  using ImageFn = int (*)(const float*, int, float*);
  using TextFn = int (*)(const char*, float*);
  std::filesystem::path path_;
  void* handle_ = nullptr;
  ImageFn encode_image_ = nullptr;
  TextFn encode_text_ = nullptr;
  int dim_ = 0;
  int side_ = 0;
  ChannelNorm norm_;
};

// ---- Construction and persistence ----------------------------------------

struct EncoderSpec {
  std::string kind = "mock";  // mock | plugin
  std::uint64_t seed = 0;
  int dim = 32;
  int input_side = 32;
  std::string checkpoint;  // encoder checkpoint; overrides kind/seed/dim when set
  std::string plugin;      // shared library for kind == plugin
};

std::unique_ptr<Encoder> make_encoder(const EncoderSpec& spec);
void save_encoder(const std::filesystem::path& path, const Encoder& enc);
std::unique_ptr<Encoder> load_encoder(const std::filesystem::path& path);

}  // namespace ezsd
