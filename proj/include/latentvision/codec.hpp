#ifndef LATENTVISION_CODEC_HPP
#define LATENTVISION_CODEC_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentvision/entropy.hpp"
#include "latentvision/nn.hpp"

namespace lvc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct QualityConfig {
  int quality_index = 8;
  int latent_channels = 320;  // M
  int hyper_channels = 192;   // N
  double rd_weight = 12000.0; // lambda on the MSE term; rate term has weight 1
  std::string weights_id;

  static QualityConfig for_quality(int q) {
    QualityConfig c;
    c.quality_index = q;
    switch (q) {
      case 1:
        c.latent_channels = 192;
        c.hyper_channels = 128;
        c.rd_weight = 30.0;
        break;
      case 4:
        c.latent_channels = 192;
        c.hyper_channels = 128;
        c.rd_weight = 800.0;
        break;
      case 8:
        c.latent_channels = 320;
        c.hyper_channels = 192;
        c.rd_weight = 12000.0;
        break;
      default:
        throw ConfigError("quality_index must be one of {1,4,8}");
    }
    c.weights_id = "q" + std::to_string(q);
    return c;
  }

  void validate() const {
    if (quality_index != 1 && quality_index != 4 && quality_index != 8)
      throw ConfigError("quality_index must be one of {1,4,8}");
    int want_m = quality_index == 8 ? 320 : 192;
    if (latent_channels != want_m)
      throw ConfigError("latent_channels inconsistent with quality_index");
    if (hyper_channels <= 0 || !(rd_weight > 0))
      throw ConfigError("hyper_channels and rd_weight must be positive");
  }
};

struct LatentCode {
  Tensor y_hat;      // [M, h, w], integer-valued
  Tensor sigma_hat;  // [M, h, w], every element >= kSigmaMin
  int quality_index = 0;
};

struct HyperLatent {
  Tensor z_hat;  // [N, h/4, w/4], integer-valued
};

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

enum class QuantizeMode { kRound, kNoise };

// Round half away from zero, or additive uniform noise in (-0.5, 0.5).
inline Tensor quantize(const Tensor& t, QuantizeMode mode, Rng* rng = nullptr) {
  Tensor out = t;
  if (mode == QuantizeMode::kRound) {
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::round(out[i]);
  } else {
    if (!rng) throw std::invalid_argument("quantize: noise mode needs an rng");
    for (int64_t i = 0; i < out.size(); ++i)
      out[i] += rng->uniform() - 0.5;
  }
  return out;
}

inline Tensor uniform_noise_like(const Tensor& t, Rng& rng) {
  Tensor n(t.shape());
  for (int64_t i = 0; i < n.size(); ++i) n[i] = rng.uniform() - 0.5;
  return n;
}

// ---------------------------------------------------------------------------
// Scale-hyperprior model
// ---------------------------------------------------------------------------

// Analysis: 4 conv stages (k5, stride 2) with GDN between; synthesis mirrors
// with IGDN; hyper transforms are 3 stages with ReLU, |y| on the way in.
// The factorized prior on z is a per-channel logistic with learned
// location/scale, tabulated once per weights load for exact coding.
class CodecModel {
 public:
  QualityConfig q;
  int internal_channels = 64;

  CodecModel(const QualityConfig& cfg, uint64_t seed, int internal = 64)
      : q(cfg), internal_channels(internal) {
    Rng rng(Rng::mix(seed, 0xC0DEC));
    const int W = internal_channels, M = q.latent_channels,
              N = q.hyper_channels;
    a1 = Conv2d(3, W, 5, 2, 2, rng);
    g1 = Gdn(W, false, rng);
    a2 = Conv2d(W, W, 5, 2, 2, rng);
    g2 = Gdn(W, false, rng);
    a3 = Conv2d(W, W, 5, 2, 2, rng);
    g3 = Gdn(W, false, rng);
    a4 = Conv2d(W, M, 5, 2, 2, rng);

    s1 = ConvTranspose2d(M, W, 5, 2, 2, 1, rng);
    ig1 = Gdn(W, true, rng);
    s2 = ConvTranspose2d(W, W, 5, 2, 2, 1, rng);
    ig2 = Gdn(W, true, rng);
    s3 = ConvTranspose2d(W, W, 5, 2, 2, 1, rng);
    ig3 = Gdn(W, true, rng);
    s4 = ConvTranspose2d(W, 3, 5, 2, 2, 1, rng);

    ha1 = Conv2d(M, W, 3, 1, 1, rng);
    ha2 = Conv2d(W, W, 5, 2, 2, rng);
    ha3 = Conv2d(W, N, 5, 2, 2, rng);

    hs1 = ConvTranspose2d(N, W, 5, 2, 2, 1, rng);
    hs2 = ConvTranspose2d(W, W, 5, 2, 2, 1, rng);
    hs3 = Conv2d(W, M, 3, 1, 1, rng);
    // Start the raw log-scales around 0.5 so sigma ~ 1.6 at init.
    hs3.b->value.fill(0.5);

    fz_loc = parameter(Tensor({N}));
    fz_logscale = parameter(Tensor({N}));  // softplus'd on use
  }

  // image [N,3,H,W] with H,W divisible by 64 -> y [N,M,H/16,W/16]
  Var analysis(const Var& x) const {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[1] != 3)
      throw std::invalid_argument("analysis: expected [N,3,H,W]");
    if (s[2] % 64 != 0 || s[3] % 64 != 0)
      throw std::invalid_argument(
          "analysis: dims must be divisible by 64 (pad first)");
    Var y = a1(x);
    y = g1(y);
    y = a2(y);
    y = g2(y);
    y = a3(y);
    y = g3(y);
    return a4(y);
  }

  // y_hat [N,M,h,w] -> image [N,3,16h,16w]; unclamped (training needs the
  // raw values, the public wrapper clamps).
  Var synthesis_raw(const Var& y) const {
    if (y->value.dim(1) != q.latent_channels)
      throw ConfigError("synthesis: channel count does not match quality");
    ++synthesis_calls;
    Var x = s1(y);
    x = ig1(x);
    x = s2(x);
    x = ig2(x);
    x = s3(x);
    x = ig3(x);
    return s4(x);
  }

  Var synthesis(const Var& y) const { return clamp(synthesis_raw(y), 0.0, 1.0); }

  // y [N,M,h,w] -> z [N,N_hyper,h/4,w/4]
  Var hyper_analysis(const Var& y) const {
    const auto& s = y->value.shape();
    if (s[2] % 4 != 0 || s[3] % 4 != 0)
      throw std::invalid_argument("hyper_analysis: dims must be divisible by 4");
    Var z = relu(ha1(abs_op(y)));
    z = relu(ha2(z));
    return ha3(z);
  }

  // z_hat -> sigma [N,M,4h,4w], floored at kSigmaMin.
  Var hyper_synthesis(const Var& z) const {
    if (z->value.dim(1) != q.hyper_channels)
      throw ConfigError("hyper_synthesis: channel count does not match quality");
    Var s = relu(hs1(z));
    s = relu(hs2(s));
    Var raw = clamp(hs3(s), -40.0, 7.0);
    return clamp_min(exp_op(raw), kSigmaMin);
  }

  // Differentiable rate of y under the conditional Gaussian, in bits.
  Var rate_y(const Var& y, const Var& sigma) const {
    Var hi = normal_cdf(divide(add_scalar(y, 0.5), sigma));
    Var lo = normal_cdf(divide(add_scalar(y, -0.5), sigma));
    Var p = clamp_min(sub(hi, lo), kProbFloor);
    return scale(sum(log_op(p)), -1.0 / M_LN2);
  }

  // Differentiable rate of z under the factorized logistic prior, in bits.
  Var rate_z(const Var& z) const {
    const auto& s = z->value.shape();
    Var loc = broadcast_channel(fz_loc, s[0], s[2], s[3]);
    Var sc = broadcast_channel(add_scalar(softplus(fz_logscale), 1e-6), s[0],
                               s[2], s[3]);
    Var hi = sigmoid(divide(sub(add_scalar(z, 0.5), loc), sc));
    Var lo = sigmoid(divide(sub(add_scalar(z, -0.5), loc), sc));
    Var p = clamp_min(sub(hi, lo), kProbFloor);
    return scale(sum(log_op(p)), -1.0 / M_LN2);
  }

  // Parameter groups.
  void collect_analysis(ParamList& out) const {
    a1.collect(out, "a1");
    g1.collect(out, "g1");
    a2.collect(out, "a2");
    g2.collect(out, "g2");
    a3.collect(out, "a3");
    g3.collect(out, "g3");
    a4.collect(out, "a4");
  }
  void collect_synthesis(ParamList& out) const {
    s1.collect(out, "s1");
    ig1.collect(out, "ig1");
    s2.collect(out, "s2");
    ig2.collect(out, "ig2");
    s3.collect(out, "s3");
    ig3.collect(out, "ig3");
    s4.collect(out, "s4");
  }
  void collect_hyper(ParamList& out) const {
    ha1.collect(out, "ha1");
    ha2.collect(out, "ha2");
    ha3.collect(out, "ha3");
    hs1.collect(out, "hs1");
    hs2.collect(out, "hs2");
    hs3.collect(out, "hs3");
  }
  void collect_factorized(ParamList& out) const {
    out.push_back({"fz_loc", fz_loc, true});
    out.push_back({"fz_logscale", fz_logscale, true});
  }
  ParamList parameters() const {
    ParamList out;
    collect_analysis(out);
    collect_synthesis(out);
    collect_hyper(out);
    collect_factorized(out);
    return out;
  }

  // Encoder-side parameters updated during joint fine-tuning: g_a, h_a, h_s.
  ParamList encoder_parameters() const {
    ParamList out;
    collect_analysis(out);
    collect_hyper(out);
    return out;
  }

  // Per-channel pmf tables for z; rebuilt lazily after weight changes.
  const std::vector<PmfTable>& factorized_tables() const {
    uint64_t h = factorized_hash();
    if (fz_tables_.empty() || h != fz_tables_hash_) {
      fz_tables_.clear();
      const int N = q.hyper_channels;
      for (int c = 0; c < N; ++c) {
        double loc = fz_loc->value[c];
        double s = std::log1p(std::exp(std::min(fz_logscale->value[c], 30.0)));
        if (fz_logscale->value[c] > 30) s = fz_logscale->value[c];
        s += 1e-6;
        int lo = static_cast<int>(std::floor(loc - 12 * s - 1));
        int hi = static_cast<int>(std::ceil(loc + 12 * s + 1));
        lo = std::min(lo, -2);
        hi = std::max(hi, 2);
        std::vector<double> p(static_cast<size_t>(hi - lo + 1));
        for (int k = lo; k <= hi; ++k) {
          double a = 1.0 / (1.0 + std::exp(-(k + 0.5 - loc) / s));
          double b = 1.0 / (1.0 + std::exp(-(k - 0.5 - loc) / s));
          p[static_cast<size_t>(k - lo)] = std::max(a - b, 0.0);
        }
        fz_tables_.push_back(quantize_pmf(lo, p));
      }
      fz_tables_hash_ = h;
    }
    return fz_tables_;
  }

  // Fast scalar rate, matching rate_y/rate_z values.
  double rate_estimate(const Tensor& y_hat, const Tensor& sigma_hat,
                       const Tensor& z_hat) const {
    double bits = 0;
    for (int64_t i = 0; i < y_hat.size(); ++i) {
      double s = sigma_hat[i];
      double p = normal_cdf_value((y_hat[i] + 0.5) / s) -
                 normal_cdf_value((y_hat[i] - 0.5) / s);
      bits -= std::log2(std::max(p, kProbFloor));
    }
    const int N = z_hat.dim(z_hat.rank() - 3);
    const int hw = z_hat.dim(z_hat.rank() - 2) * z_hat.dim(z_hat.rank() - 1);
    for (int c = 0; c < N; ++c) {
      double loc = fz_loc->value[c];
      double s =
          std::log1p(std::exp(std::min(fz_logscale->value[c], 30.0))) + 1e-6;
      for (int i = 0; i < hw; ++i) {
        double z = z_hat[static_cast<int64_t>(c) * hw + i];
        double a = 1.0 / (1.0 + std::exp(-(z + 0.5 - loc) / s));
        double b = 1.0 / (1.0 + std::exp(-(z - 0.5 - loc) / s));
        bits -= std::log2(std::max(a - b, kProbFloor));
      }
    }
    return bits;
  }

  mutable int64_t synthesis_calls = 0;

  Conv2d a1, a2, a3, a4;
  Gdn g1, g2, g3;
  ConvTranspose2d s1, s2, s3, s4;
  Gdn ig1, ig2, ig3;
  Conv2d ha1, ha2, ha3;
  ConvTranspose2d hs1, hs2;
  Conv2d hs3;
  Var fz_loc, fz_logscale;

 private:
  uint64_t factorized_hash() const {
    ParamList p;
    collect_factorized(p);
    return params_hash(p);
  }

  mutable std::vector<PmfTable> fz_tables_;
  mutable uint64_t fz_tables_hash_ = 0;
};

// ---------------------------------------------------------------------------
// compress / partial_decode
// ---------------------------------------------------------------------------

struct CompressResult {
  LatentCode latents;
  HyperLatent hyper;
  std::vector<uint8_t> stream;
};

inline std::vector<int32_t> tensor_symbols(const Tensor& t) {
  std::vector<int32_t> s(static_cast<size_t>(t.size()));
  for (int64_t i = 0; i < t.size(); ++i)
    s[static_cast<size_t>(i)] = static_cast<int32_t>(std::llround(t[i]));
  return s;
}

// image: [3,H,W] in [0,1], H and W divisible by 64.
inline CompressResult compress(const Tensor& image, const CodecModel& model,
                               GaussianPmfCache* pmf_cache = nullptr) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("compress: expected [3,H,W] image");
  const int H = image.dim(1), W = image.dim(2);
  if (H % 64 != 0 || W % 64 != 0)
    throw std::invalid_argument("compress: dims must be divisible by 64");
  if (!image.all_finite())
    throw std::invalid_argument("compress: non-finite pixels");

  NoGradGuard ng;
  Tensor x4(std::vector<int>{1, 3, H, W},
            std::vector<double>(image.data(), image.data() + image.size()));
  Var y = model.analysis(constant(std::move(x4)));
  Tensor y_hat = quantize(y->value, QuantizeMode::kRound);
  Var z = model.hyper_analysis(y);
  Tensor z_hat = quantize(z->value, QuantizeMode::kRound);
  Var sigma = model.hyper_synthesis(constant(z_hat));
  const Tensor& sig = sigma->value;

  // z segment under the factorized prior.
  const auto& ztabs = model.factorized_tables();
  std::vector<int32_t> zsyms = tensor_symbols(z_hat);
  std::vector<const PmfTable*> zpmfs(zsyms.size());
  const int zc = z_hat.dim(1), zhw = z_hat.dim(2) * z_hat.dim(3);
  for (int c = 0; c < zc; ++c)
    for (int i = 0; i < zhw; ++i)
      zpmfs[static_cast<size_t>(c) * zhw + i] = &ztabs[static_cast<size_t>(c)];
  std::vector<uint8_t> z_bytes = range_encode(zsyms, zpmfs);

  // y segment under per-element Gaussians from sigma.
  GaussianPmfCache local_cache;
  GaussianPmfCache& cache = pmf_cache ? *pmf_cache : local_cache;
  std::vector<int32_t> ysyms = tensor_symbols(y_hat);
  std::vector<const PmfTable*> ypmfs(ysyms.size());
  for (size_t i = 0; i < ysyms.size(); ++i)
    ypmfs[i] = &cache.get(sig[static_cast<int64_t>(i)]);
  std::vector<uint8_t> y_bytes = range_encode(ysyms, ypmfs);

  Bitstream bs;
  bs.quality_index = static_cast<uint8_t>(model.q.quality_index);
  bs.image_h = static_cast<uint16_t>(H);
  bs.image_w = static_cast<uint16_t>(W);
  bs.z_bytes = std::move(z_bytes);
  bs.y_bytes = std::move(y_bytes);

  CompressResult r;
  const int M = model.q.latent_channels;
  r.latents.y_hat = Tensor(
      {M, H / 16, W / 16},
      std::vector<double>(y_hat.data(), y_hat.data() + y_hat.size()));
  r.latents.sigma_hat =
      Tensor({M, H / 16, W / 16},
             std::vector<double>(sig.data(), sig.data() + sig.size()));
  r.latents.quality_index = model.q.quality_index;
  r.hyper.z_hat =
      Tensor({model.q.hyper_channels, H / 64, W / 64},
             std::vector<double>(z_hat.data(), z_hat.data() + z_hat.size()));
  r.stream = serialize(bs);
  return r;
}

// Recovers (y_hat, sigma_hat) from a stream without ever touching the
// synthesis transform.
inline LatentCode partial_decode(const std::vector<uint8_t>& bytes,
                                 const CodecModel& model,
                                 GaussianPmfCache* pmf_cache = nullptr) {
  Bitstream bs = parse(bytes);
  if (bs.quality_index != model.q.quality_index)
    throw ConfigError("stream quality does not match codec weights");
  const int H = bs.image_h, W = bs.image_w;
  if (H % 64 != 0 || W % 64 != 0) throw DecodeError("bad image dims in header");
  const int M = model.q.latent_channels, N = model.q.hyper_channels;
  const int zh = H / 64, zw = W / 64, yh = H / 16, yw = W / 16;

  NoGradGuard ng;
  const auto& ztabs = model.factorized_tables();
  std::vector<const PmfTable*> zpmfs(static_cast<size_t>(N) * zh * zw);
  for (int c = 0; c < N; ++c)
    for (int i = 0; i < zh * zw; ++i)
      zpmfs[static_cast<size_t>(c) * zh * zw + i] =
          &ztabs[static_cast<size_t>(c)];
  std::vector<int32_t> zsyms = range_decode(bs.z_bytes, zpmfs, zpmfs.size());
  Tensor z_hat({1, N, zh, zw});
  for (size_t i = 0; i < zsyms.size(); ++i)
    z_hat[static_cast<int64_t>(i)] = zsyms[i];

  Var sigma = model.hyper_synthesis(constant(z_hat));
  const Tensor& sig = sigma->value;

  GaussianPmfCache local_cache;
  GaussianPmfCache& cache = pmf_cache ? *pmf_cache : local_cache;
  std::vector<const PmfTable*> ypmfs(static_cast<size_t>(M) * yh * yw);
  for (size_t i = 0; i < ypmfs.size(); ++i)
    ypmfs[i] = &cache.get(sig[static_cast<int64_t>(i)]);
  std::vector<int32_t> ysyms = range_decode(bs.y_bytes, ypmfs, ypmfs.size());

  LatentCode code;
  code.quality_index = bs.quality_index;
  code.y_hat = Tensor({M, yh, yw});
  for (size_t i = 0; i < ysyms.size(); ++i)
    code.y_hat[static_cast<int64_t>(i)] = ysyms[i];
  code.sigma_hat = Tensor(
      {M, yh, yw}, std::vector<double>(sig.data(), sig.data() + sig.size()));
  return code;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline void save_codec(const std::string& path, const CodecModel& model) {
  nlohmann::json cfg = {
      {"type", "codec"},
      {"quality_index", model.q.quality_index},
      {"latent_channels", model.q.latent_channels},
      {"hyper_channels", model.q.hyper_channels},
      {"rd_weight", model.q.rd_weight},
      {"weights_id", model.q.weights_id},
      {"internal_channels", model.internal_channels},
  };
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("LVCW", 4);
  std::string j = cfg.dump();
  write_u32(os, static_cast<uint32_t>(j.size()));
  os.write(j.data(), static_cast<std::streamsize>(j.size()));
  write_params(os, model.parameters());
}

inline CodecModel load_codec(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LVCW", 4) != 0)
    throw std::runtime_error("not a latentvision checkpoint: " + path);
  uint32_t jlen = read_u32(is);
  std::string j(jlen, '\0');
  is.read(j.data(), jlen);
  auto cfg = nlohmann::json::parse(j);
  if (cfg.value("type", "") != "codec")
    throw std::runtime_error("checkpoint is not a codec: " + path);
  QualityConfig q;
  q.quality_index = cfg.at("quality_index").get<int>();
  q.latent_channels = cfg.at("latent_channels").get<int>();
  q.hyper_channels = cfg.at("hyper_channels").get<int>();
  q.rd_weight = cfg.at("rd_weight").get<double>();
  q.weights_id = cfg.value("weights_id", "");
  CodecModel model(q, 0, cfg.value("internal_channels", 64));
  assign_params(model.parameters(), read_params(is));
  return model;
}

}  // namespace lvc

#endif  // LATENTVISION_CODEC_HPP
