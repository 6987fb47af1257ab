#include <gtest/gtest.h>

#include <cmath>

#include "ezsd/dataset.hpp"
#include "ezsd/encoder.hpp"
#include "support.hpp"

using namespace ezsd;
using namespace ezsd::testing;

TEST(Encoder, PaddedSquareSplitsPaddingBottomRight) {
  Image img(4, 4);
  std::fill(img.rgb.begin(), img.rgb.end(), 200);
  const Image sq = extract_padded_square(img, Box{0, 0, 4, 1});
  ASSERT_EQ(sq.width, 4);
  ASSERT_EQ(sq.height, 4);
  // h = 1, side = 4: one padded row on top, two below.
  EXPECT_EQ(sq.at(0, 0, 0), 0);
  EXPECT_EQ(sq.at(0, 1, 0), 200);
  EXPECT_EQ(sq.at(3, 1, 2), 200);
  EXPECT_EQ(sq.at(0, 2, 0), 0);
  EXPECT_EQ(sq.at(0, 3, 0), 0);
}

TEST(Encoder, PaddedSquareRasterizesOutward) {
  Image img(10, 10);
  const Image sq = extract_padded_square(img, Box{1.5, 2.2, 4.1, 6.0});
  EXPECT_EQ(sq.width, 4);  // rows 2..5, cols 1..4
  EXPECT_THROW(extract_padded_square(img, Box{20, 20, 30, 30}), EncoderError);
}

TEST(Encoder, PreprocessAppliesChannelNorm) {
  Image img(6, 6);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      img.at(x, y, 0) = 255;
      img.at(x, y, 1) = 0;
      img.at(x, y, 2) = 51;
    }
  const ChannelNorm norm;
  const auto t = crop_and_preprocess(img, Box{0, 0, 6, 6}, 4, norm);
  ASSERT_EQ(t.chw.size(), 48u);
  for (int i = 0; i < 16; ++i) {
    EXPECT_NEAR(t.chw[i], (1.0 - norm.mean[0]) / norm.std[0], 1e-5);
    EXPECT_NEAR(t.chw[16 + i], (0.0 - norm.mean[1]) / norm.std[1], 1e-5);
    EXPECT_NEAR(t.chw[32 + i], (0.2 - norm.mean[2]) / norm.std[2], 1e-5);
  }
}

TEST(Encoder, PromptTemplate) {
  EXPECT_EQ(format_prompt("a photo of a {name}", "red_square"), "a photo of a red_square");
  EXPECT_EQ(format_prompt("{name}/{name}", "x"), "x/x");
}

TEST(Encoder, ClassifyFeatureHandCase) {
  const std::vector<TextEmbedding> e{{"a", {1, 0}}, {"b", {0, 2}}, {"c", {1, 1}}};
  const std::vector<float> f{3, 0};
  const auto c = classify_feature(f, e, 0.5);
  EXPECT_EQ(c.pred, 0);
  EXPECT_NEAR(c.cosines[0], 1.0, 1e-12);
  EXPECT_NEAR(c.cosines[1], 0.0, 1e-12);
  EXPECT_NEAR(c.cosines[2], 1 / std::sqrt(2.0), 1e-12);
  const double z = std::exp(2.0) + 1.0 + std::exp(2.0 / std::sqrt(2.0));
  EXPECT_NEAR(c.scores[0], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(c.scores[1], 1.0 / z, 1e-12);
}

TEST(Encoder, ClassifyTiesGoToLowerIndex) {
  const std::vector<TextEmbedding> e{{"a", {1, 1}}, {"b", {1, -1}}};
  const std::vector<float> f{1, 0};
  EXPECT_EQ(classify_feature(f, e).pred, 0);
  EXPECT_THROW(classify_feature(std::vector<float>{0, 0}, e), EncoderError);
  EXPECT_THROW(classify_feature(f, e, 0.0), EncoderError);
}

TEST(Encoder, MockIsDeterministicAndSeeded) {
  const MockEncoder a({3, 16, 24}), b({3, 16, 24}), c({4, 16, 24});
  EXPECT_EQ(a.encode_prompt("p", "unknown thing"), b.encode_prompt("p", "unknown thing"));
  EXPECT_NE(a.encode_prompt("p", "unknown thing"), c.encode_prompt("p", "unknown thing"));
  Image img(20, 20);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 7);
  EXPECT_EQ(encode_image_region(a, img, Box{2, 2, 15, 18}), encode_image_region(b, img, Box{2, 2, 15, 18}));
  EXPECT_EQ(a.dim(), 16);
}

TEST(Encoder, MockRecognizesToyInstances) {
  TempDir dir("enc");
  ToyOptions opts;
  opts.n_images = 12;
  const Dataset ds = make_toy_dataset(dir.path(), opts);
  const MockEncoder enc({0, 32, 32});
  const auto dict = encode_text(enc, ds.split.all());
  std::size_t correct = 0;
  for (const auto& a : ds.annotations) {
    const Image img = ds.load_image(ds.image(a.image_id));
    const auto f = encode_image_region(enc, img, enlarge(a.box, 1.2, Box{0, 0, 128, 128}));
    const auto c = classify_feature(f, dict);
    correct += dict[static_cast<std::size_t>(c.pred)].category_name == ds.category_name(a.category_id);
  }
  EXPECT_EQ(correct, ds.annotations.size());
}

TEST(Encoder, MockCheckpointRoundTrip) {
  TempDir dir("enc");
  MockEncoder enc({5, 8, 16});
  std::vector<float> gain(MockEncoder::kDescriptorSize, 1.5f), bias(MockEncoder::kDescriptorSize, -0.25f);
  enc.set_normalization(gain, bias);
  save_encoder(dir / "e.ckpt", enc);
  const auto back = load_encoder(dir / "e.ckpt");
  Image img(16, 16);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 5);
  EXPECT_EQ(encode_image_region(*back, img, Box{0, 0, 16, 16}), encode_image_region(enc, img, Box{0, 0, 16, 16}));
  save_encoder(dir / "f.ckpt", *back);
  EXPECT_EQ(read_bytes(dir / "e.ckpt"), read_bytes(dir / "f.ckpt"));
}

TEST(Encoder, MockParameterPartition) {
  const MockEncoder enc({0, 8, 16});
  int norm = 0, frozen = 0;
  for (const auto& p : enc.parameters()) (p.normalization ? norm : frozen)++;
  EXPECT_EQ(norm, 2);
  EXPECT_GE(frozen, 1);
  EXPECT_THROW(MockEncoder({0, 8, 16}).set_normalization({1.0f}, {0.0f}), EncoderError);
}

TEST(Encoder, NormTrainableMatchesEncode) {
  MockEncoder enc({2, 12, 16});
  std::vector<float> gain(MockEncoder::kDescriptorSize), bias(MockEncoder::kDescriptorSize);
  for (int k = 0; k < MockEncoder::kDescriptorSize; ++k) {
    gain[k] = 0.5f + 0.1f * k;
    bias[k] = 0.05f * k - 0.3f;
  }
  enc.set_normalization(gain, bias);
  Image img(24, 24);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>((i * 31) % 251);
  const auto crop = crop_and_preprocess(img, Box{1, 3, 20, 22}, 16);
  const auto t = enc.norm_trainable();
  const auto f = t->forward(t->prepare(crop));
  const auto g = enc.encode(crop);
  ASSERT_EQ(f.size(), g.size());
  for (std::size_t d = 0; d < f.size(); ++d) EXPECT_NEAR(f[d], g[d], 1e-4);
}

TEST(Encoder, NormTrainableGradientMatchesFiniteDifference) {
  const MockEncoder enc({1, 6, 16});
  Image img(16, 16);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>((i * 17) % 256);
  const auto crop = crop_and_preprocess(img, Box{0, 0, 16, 16}, 16);
  auto t = enc.norm_trainable();
  const auto z = t->prepare(crop);
  const std::vector<double> w{0.3, -1.2, 0.7, 0.1, 2.0, -0.4};  // loss = w . f
  auto loss = [&](const std::vector<double>& v) {
    t->set_values(v);
    const auto f = t->forward(z);
    double s = 0;
    for (std::size_t d = 0; d < f.size(); ++d) s += w[d] * f[d];
    return s;
  };
  const auto v0 = t->values();
  t->set_values(v0);
  std::vector<double> grad(v0.size(), 0.0);
  t->backward(z, w, grad);
  for (std::size_t i = 0; i < v0.size(); ++i)
    EXPECT_LT(relative_error(grad[i], central_difference(loss, v0, i, 1e-5)), 1e-5) << "param " << i;
}

TEST(Encoder, PluginAdapter) {
  const auto enc = make_encoder(EncoderSpec{"plugin", 0, 0, 0, "", EZSD_TEST_PLUGIN});
  EXPECT_EQ(enc->dim(), 4);
  EXPECT_EQ(enc->input_side(), 8);
  EXPECT_FLOAT_EQ(enc->channel_norm().mean[1], 0.5f);
  Image img(10, 10);
  std::fill(img.rgb.begin(), img.rgb.end(), 255);
  const auto f = encode_image_region(*enc, img, Box{0, 0, 10, 10});
  EXPECT_NEAR(f[0], (1.0 - 0.5) / 0.25, 1e-5);
  EXPECT_FLOAT_EQ(f[3], 1.0f);
  EXPECT_EQ(encode_text(*enc, {"ab"}, "{name}")[0].values, (std::vector<float>{0.97f, 0.98f, 0.0f, 0.0f}));
  EXPECT_THROW(encode_text(*enc, {"fail"}, "{name}"), EncoderError);
  EXPECT_TRUE(enc->parameters().empty());
  EXPECT_EQ(enc->norm_trainable(), nullptr);
}

TEST(Encoder, PluginErrors) {
  EXPECT_THROW(PluginEncoder("/nonexistent/libnothing.so"), EncoderError);
  EXPECT_THROW(PluginEncoder(EZSD_BROKEN_PLUGIN), EncoderError);
  EXPECT_THROW(make_encoder(EncoderSpec{"plugin", 0, 0, 0, "", ""}), EncoderError);
  EXPECT_THROW(make_encoder(EncoderSpec{"bogus", 0, 8, 8, "", ""}), EncoderError);
  EXPECT_THROW(load_encoder("/nonexistent/enc.ckpt"), EncoderError);
}
