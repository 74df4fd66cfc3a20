#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "latentvision/codec.hpp"

using namespace lvc;

namespace {

Tensor random_image(int h, int w, Rng& rng) {
  Tensor img({3, h, w});
  for (int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  return img;
}

Tensor as_batch(const Tensor& img) {
  return Tensor({1, img.dim(0), img.dim(1), img.dim(2)},
                std::vector<double>(img.data(), img.data() + img.size()));
}

}  // namespace

TEST(Codec, QualityMap) {
  QualityConfig q1 = QualityConfig::for_quality(1);
  QualityConfig q4 = QualityConfig::for_quality(4);
  QualityConfig q8 = QualityConfig::for_quality(8);
  EXPECT_EQ(q1.latent_channels, 192);
  EXPECT_EQ(q4.latent_channels, 192);
  EXPECT_EQ(q8.latent_channels, 320);
  EXPECT_LT(q1.rd_weight, q4.rd_weight);
  EXPECT_LT(q4.rd_weight, q8.rd_weight);
  EXPECT_THROW(QualityConfig::for_quality(2), ConfigError);
}

TEST(Codec, ShapeAlgebra) {
  // Small internal width keeps this fast; the shape contract is width
  // independent.
  Rng rng(1);
  {
    CodecModel m(QualityConfig::for_quality(8), 1, 8);
    Var y = m.analysis(constant(as_batch(random_image(256, 256, rng))));
    EXPECT_EQ(y->value.shape(), (std::vector<int>{1, 320, 16, 16}));
    Var z = m.hyper_analysis(y);
    EXPECT_EQ(z->value.shape(), (std::vector<int>{1, 192, 4, 4}));
    Var sigma = m.hyper_synthesis(z);
    EXPECT_EQ(sigma->value.shape(), y->value.shape());
    Var recon = m.synthesis(y);
    EXPECT_EQ(recon->value.shape(), (std::vector<int>{1, 3, 256, 256}));
  }
  {
    CodecModel m(QualityConfig::for_quality(1), 1, 8);
    Var y = m.analysis(constant(as_batch(random_image(256, 256, rng))));
    EXPECT_EQ(y->value.shape(), (std::vector<int>{1, 192, 16, 16}));
  }
  {
    CodecModel m(QualityConfig::for_quality(4), 1, 8);
    Var y = m.analysis(constant(as_batch(random_image(64, 128, rng))));
    EXPECT_EQ(y->value.shape(), (std::vector<int>{1, 192, 4, 8}));
    Var z = m.hyper_analysis(y);
    EXPECT_EQ(z->value.shape(), (std::vector<int>{1, 128, 1, 2}));
  }
}

TEST(Codec, SynthesisClampsToUnitRange) {
  CodecModel m(QualityConfig::for_quality(4), 3, 8);
  Var y = constant(Tensor({1, 192, 4, 4}));
  Var img = m.synthesis(y);
  EXPECT_EQ(img->value.shape(), (std::vector<int>{1, 3, 64, 64}));
  for (int64_t i = 0; i < img->value.size(); ++i) {
    EXPECT_GE(img->value[i], 0.0);
    EXPECT_LE(img->value[i], 1.0);
  }
}

TEST(Codec, QuantizeRoundHalfAwayFromZero) {
  Tensor t({6}, {0.4, -0.4, 1.5, -1.5, 2.5, 0.0});
  Tensor q = quantize(t, QuantizeMode::kRound);
  EXPECT_EQ(q[0], 0.0);
  EXPECT_EQ(q[1], 0.0);
  EXPECT_EQ(q[2], 2.0);
  EXPECT_EQ(q[3], -2.0);
  EXPECT_EQ(q[4], 3.0);
  EXPECT_EQ(q[5], 0.0);
}

TEST(Codec, QuantizeNoiseBoundedAndIdempotentRound) {
  Rng rng(7);
  Tensor t({100});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 3;
  Tensor n = quantize(t, QuantizeMode::kNoise, &rng);
  for (int64_t i = 0; i < t.size(); ++i) EXPECT_LE(std::fabs(n[i] - t[i]), 0.5);
  Tensor r = quantize(t, QuantizeMode::kRound);
  Tensor rr = quantize(r, QuantizeMode::kRound);
  for (int64_t i = 0; i < t.size(); ++i) EXPECT_EQ(r[i], rr[i]);
  EXPECT_THROW(quantize(t, QuantizeMode::kNoise, nullptr),
               std::invalid_argument);
}

TEST(Codec, SigmaFloorUnderAdversarialWeights) {
  // Drive the raw scale head to -inf territory; every output must clamp to
  // exactly sigma_min.
  CodecModel m(QualityConfig::for_quality(4), 5, 8);
  for (const auto& p : m.parameters()) {
    if (p.name.rfind("hs3", 0) == 0) p.var->value.fill(0.0);
  }
  // Zero weights + strongly negative bias on the last hyper-synthesis conv.
  for (const auto& p : m.parameters())
    if (p.name == "hs3.b") p.var->value.fill(-1e6);
  Var z = constant(Tensor({1, 128, 2, 2}));
  Var sigma = m.hyper_synthesis(z);
  for (int64_t i = 0; i < sigma->value.size(); ++i)
    EXPECT_EQ(sigma->value[i], 0.11);
}

TEST(Codec, RateOracleUnitSigma) {
  // One zero symbol under sigma=1 costs -log2(0.38292492) = 1.3848665 bits.
  Tensor y({1, 1, 1, 1});
  Tensor sigma({1, 1, 1, 1}, {1.0});
  CodecModel m(QualityConfig::for_quality(4), 2, 8);
  Var bits = m.rate_y(constant(y), constant(sigma));
  EXPECT_NEAR(bits->value[0], 1.3848665342909896, 1e-9);
}

TEST(Codec, RateNearZeroAtSigmaFloor) {
  // All-zero latents with sigma at the floor are nearly free: <= 0.01
  // bits per element.
  Tensor y({1, 4, 3, 3});
  Tensor sigma({1, 4, 3, 3});
  sigma.fill(0.11);
  CodecModel m(QualityConfig::for_quality(4), 2, 8);
  Var bits = m.rate_y(constant(y), constant(sigma));
  EXPECT_LE(bits->value[0] / static_cast<double>(y.size()), 0.01);
}

TEST(Codec, RateEstimateMatchesGraphRate) {
  Rng rng(9);
  CodecModel m(QualityConfig::for_quality(4), 4, 8);
  Tensor img = random_image(64, 64, rng);
  Var y = m.analysis(constant(as_batch(img)));
  Tensor y_hat = quantize(y->value, QuantizeMode::kRound);
  Var z = m.hyper_analysis(y);
  Tensor z_hat = quantize(z->value, QuantizeMode::kRound);
  Var sigma = m.hyper_synthesis(constant(z_hat));
  double scalar = m.rate_estimate(y_hat, sigma->value, z_hat);
  Var graph = add(m.rate_y(constant(y_hat), sigma),
                  m.rate_z(constant(z_hat)));
  EXPECT_NEAR(scalar, graph->value[0], 1e-6 * std::max(1.0, scalar));
}

TEST(Codec, RateEstimateTracksActualBytes) {
  // |estimate - 8*bytes| <= 3% of actual + 64 bits over random images.
  Rng rng(13);
  CodecModel m(QualityConfig::for_quality(1), 6, 8);
  GaussianPmfCache cache;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor img = random_image(64, 64, rng);
    CompressResult res = compress(img, m, &cache);
    double est = m.rate_estimate(res.latents.y_hat, res.latents.sigma_hat,
                                 res.hyper.z_hat);
    Bitstream bs = parse(res.stream);
    double actual =
        8.0 * static_cast<double>(bs.z_bytes.size() + bs.y_bytes.size());
    EXPECT_LE(std::fabs(est - actual), 0.03 * actual + 64.0) << "trial "
                                                             << trial;
  }
}

TEST(Codec, CompressDeterministicAndRoundTrips) {
  Rng rng(17);
  CodecModel m(QualityConfig::for_quality(4), 8, 8);
  GaussianPmfCache cache;
  Tensor img = random_image(64, 64, rng);
  CompressResult a = compress(img, m, &cache);
  CompressResult b = compress(img, m, &cache);
  EXPECT_EQ(a.stream, b.stream);

  m.synthesis_calls = 0;
  LatentCode code = partial_decode(a.stream, m, &cache);
  EXPECT_EQ(m.synthesis_calls, 0);
  ASSERT_TRUE(code.y_hat.same_shape(a.latents.y_hat));
  for (int64_t i = 0; i < code.y_hat.size(); ++i) {
    EXPECT_EQ(code.y_hat[i], a.latents.y_hat[i]);
    EXPECT_EQ(code.sigma_hat[i], a.latents.sigma_hat[i]);
  }
}

TEST(Codec, CompressRejectsBadInputs) {
  CodecModel m(QualityConfig::for_quality(4), 8, 8);
  Rng rng(3);
  EXPECT_THROW(compress(random_image(60, 64, rng), m), std::invalid_argument);
  Tensor nan_img = random_image(64, 64, rng);
  nan_img[0] = std::nan("");
  EXPECT_THROW(compress(nan_img, m), std::invalid_argument);
}

TEST(Codec, PartialDecodeQualityMismatch) {
  Rng rng(19);
  CodecModel m1(QualityConfig::for_quality(1), 8, 8);
  CodecModel m4(QualityConfig::for_quality(4), 8, 8);
  CompressResult res = compress(random_image(64, 64, rng), m1);
  EXPECT_THROW(partial_decode(res.stream, m4), ConfigError);
}

TEST(Codec, CheckpointRoundTrip) {
  Rng rng(21);
  CodecModel m(QualityConfig::for_quality(8), 10, 8);
  std::string path =
      (std::filesystem::temp_directory_path() / "lvc_codec_test.lvcw")
          .string();
  save_codec(path, m);
  CodecModel back = load_codec(path);
  EXPECT_EQ(params_hash(back.parameters()), params_hash(m.parameters()));
  EXPECT_EQ(back.q.quality_index, 8);
  EXPECT_EQ(back.internal_channels, 8);
  std::filesystem::remove(path);
}

TEST(Codec, GradientCheckReducedCodec) {
  // Rate + distortion with fixed additive noise; analytic vs central
  // differences on a couple of transform weights.
  Rng rng(25);
  CodecModel m(QualityConfig::for_quality(4), 12, 4);
  Tensor img({1, 3, 64, 64});
  for (int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  Var xv = constant(img);
  Var ny, nz;
  {
    NoGradGuard ng;
    Var y0 = m.analysis(xv);
    ny = constant(uniform_noise_like(y0->value, rng));
    Var z0 = m.hyper_analysis(y0);
    nz = constant(uniform_noise_like(z0->value, rng));
  }
  auto loss = [&] {
    Var y = add(m.analysis(xv), ny);
    Var z = add(m.hyper_analysis(m.analysis(xv)), nz);
    Var sigma = m.hyper_synthesis(z);
    Var recon = m.synthesis_raw(y);
    Var dist = mean(square(sub(recon, xv)));
    Var bits = add(m.rate_y(y, sigma), m.rate_z(z));
    return add(scale(dist, 100.0), scale(bits, 1.0 / 4096.0));
  };
  ParamList params = m.parameters();
  int checked = 0;
  for (const auto& p : params) {
    if (p.name != "a1.w" && p.name != "hs3.w" && p.name != "fz_logscale" &&
        p.name != "s2.w")
      continue;
    double err = lvc::testing::gradcheck(loss, p.var, 4, 1e-5,
                                        1000 + checked);
    EXPECT_LT(err, 1e-3) << p.name;
    ++checked;
  }
  EXPECT_EQ(checked, 4);
}
