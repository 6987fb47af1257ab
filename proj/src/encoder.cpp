#include "ezsd/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ezsd/util.hpp"

namespace ezsd {

Image extract_padded_square(const Image& image, const Box& box) {
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int x1 = std::min(image.width, static_cast<int>(std::ceil(box.x2)));
  const int y1 = std::min(image.height, static_cast<int>(std::ceil(box.y2)));
  if (x1 <= x0 || y1 <= y0) throw EncoderError("crop box " + to_string(box) + " lies outside the image");
  const int w = x1 - x0;
  const int h = y1 - y0;
  const int side = std::max(w, h);
  const int left = (side - w) / 2;
  const int top = (side - h) / 2;
  Image out(side, side);
  for (int y = 0; y < h; ++y) {
    const auto* src = &image.rgb[(static_cast<std::size_t>(y0 + y) * image.width + x0) * 3];
    auto* dst = &out.rgb[(static_cast<std::size_t>(top + y) * side + left) * 3];
    std::copy(src, src + static_cast<std::size_t>(w) * 3, dst);
  }
  return out;
}

CropTensor crop_and_preprocess(const Image& image, const Box& box, int input_side, const ChannelNorm& norm) {
  if (input_side <= 0) throw EncoderError("input_side must be positive");
  const Image sq = extract_padded_square(image, box);
  const int L = sq.width;
  const int S = input_side;
  CropTensor out;
  out.side = S;
  out.chw.resize(static_cast<std::size_t>(3) * S * S);

  // Bilinear, half-pixel centers.
  const double scale = static_cast<double>(L) / S;
  std::vector<int> i0(S), i1(S);
  std::vector<double> frac(S);
  for (int d = 0; d < S; ++d) {
    const double src = std::clamp((d + 0.5) * scale - 0.5, 0.0, static_cast<double>(L - 1));
    i0[d] = static_cast<int>(std::floor(src));
    i1[d] = std::min(i0[d] + 1, L - 1);
    frac[d] = src - i0[d];
  }
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double fy = frac[y], fx = frac[x];
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * sq.at(i0[x], i0[y], c) + fx * sq.at(i1[x], i0[y], c)) +
                         fy * ((1 - fx) * sq.at(i0[x], i1[y], c) + fx * sq.at(i1[x], i1[y], c));
        out.chw[c * plane + static_cast<std::size_t>(y) * S + x] =
            static_cast<float>((v / 255.0 - norm.mean[c]) / norm.std[c]);
      }
    }
  }
  return out;
}

std::string format_prompt(const std::string& prompt_template, const std::string& name) {
  static const std::string kToken = "{name}";
  std::string out = prompt_template;
  for (auto pos = out.find(kToken); pos != std::string::npos; pos = out.find(kToken, pos + name.size()))
    out.replace(pos, kToken.size(), name);
  return out;
}

FeatureVector encode_image_region(const Encoder& enc, const Image& image, const Box& box) {
  return enc.encode(crop_and_preprocess(image, box, enc.input_side(), enc.channel_norm()));
}

std::vector<FeatureVector> encode_image_regions(const Encoder& enc, const Image& image,
                                                std::span<const Box> boxes, int workers) {
  std::vector<FeatureVector> out(boxes.size());
  parallel_for(boxes.size(), workers, [&](std::size_t i) { out[i] = encode_image_region(enc, image, boxes[i]); });
  return out;
}

std::vector<TextEmbedding> encode_text(const Encoder& enc, const std::vector<std::string>& names,
                                       const std::string& prompt_template) {
  if (names.empty()) throw EncoderError("encode_text requires at least one category name");
  std::vector<TextEmbedding> out;
  out.reserve(names.size());
  for (const auto& name : names) {
    if (name.empty()) throw EncoderError("encode_text: empty category name");
    out.push_back({name, enc.encode_prompt(format_prompt(prompt_template, name), name)});
    if (static_cast<int>(out.back().values.size()) != enc.dim())
      throw EncoderError("text embedding for '" + name + "' has the wrong dimension");
  }
  return out;
}

Classification classify_feature(std::span<const float> feature, std::span<const TextEmbedding> embeddings,
                                double temperature) {
  if (embeddings.empty()) throw EncoderError("classify_feature needs at least one embedding");
  if (!(temperature > 0.0)) throw EncoderError("temperature must be positive");
  double fnorm = 0.0;
  for (float v : feature) fnorm += static_cast<double>(v) * v;
  fnorm = std::sqrt(fnorm);
  if (fnorm == 0.0) throw EncoderError("classify_feature: zero-norm feature");

  Classification out;
  out.cosines.reserve(embeddings.size());
  for (const auto& e : embeddings) {
    if (e.values.size() != feature.size())
      throw EncoderError("embedding '" + e.category_name + "' dimension differs from feature");
    double dot = 0.0, enorm = 0.0;
    for (std::size_t k = 0; k < feature.size(); ++k) {
      dot += static_cast<double>(feature[k]) * e.values[k];
      enorm += static_cast<double>(e.values[k]) * e.values[k];
    }
    if (enorm == 0.0) throw EncoderError("embedding '" + e.category_name + "' has zero norm");
    out.cosines.push_back(dot / (fnorm * std::sqrt(enorm)));
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.cosines.size(); ++i) {
    if (out.cosines[i] > best) {
      best = out.cosines[i];
      out.pred = static_cast<int>(i);
    }
  }
  out.scores.resize(out.cosines.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < out.cosines.size(); ++i) {
    out.scores[i] = std::exp((out.cosines[i] - best) / temperature);
    sum += out.scores[i];
  }
  for (double& s : out.scores) s /= sum;
  return out;
}

// ---- Construction and persistence ----------------------------------------

std::unique_ptr<Encoder> make_encoder(const EncoderSpec& spec) {
  if (!spec.checkpoint.empty()) return load_encoder(spec.checkpoint);
  if (spec.kind == "mock") return std::make_unique<MockEncoder>(MockEncoderConfig{spec.seed, spec.dim, spec.input_side});
  if (spec.kind == "plugin") {
    if (spec.plugin.empty()) throw EncoderError("plugin encoder requires a shared library path");
    return std::make_unique<PluginEncoder>(spec.plugin);
  }
  throw EncoderError("unknown encoder kind '" + spec.kind + "'");
}

void save_encoder(const std::filesystem::path& path, const Encoder& enc) {
  Checkpoint ckpt;
  ckpt.header["encoder"] = enc.describe();
  nlohmann::json partition = nlohmann::json::object();
  for (auto& p : enc.parameters()) {
    partition[p.array.name] = p.normalization ? "normalization" : "frozen";
    ckpt.arrays.push_back(std::move(p.array));
  }
  ckpt.header["partition"] = partition;
  write_checkpoint(path, ckpt);
}

std::unique_ptr<Encoder> load_encoder(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw EncoderError("encoder checkpoint not found: " + path.string());
  const Checkpoint ckpt = read_checkpoint(path);
  if (!ckpt.header.contains("encoder")) throw EncoderError("not an encoder checkpoint: " + path.string());
  const auto& d = ckpt.header.at("encoder");
  const auto kind = d.at("kind").get<std::string>();
  if (kind == "mock") {
    auto enc = std::make_unique<MockEncoder>(MockEncoderConfig{d.at("seed").get<std::uint64_t>(),
                                                               d.at("dim").get<int>(), d.at("input_side").get<int>()});
    enc->load_parameters(ckpt.arrays);
    return enc;
  }
  if (kind == "plugin") return std::make_unique<PluginEncoder>(d.at("library").get<std::string>());
  throw EncoderError("unknown encoder kind '" + kind + "' in " + path.string());
}

}  // namespace ezsd
