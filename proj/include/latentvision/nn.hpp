#ifndef LATENTVISION_NN_HPP
#define LATENTVISION_NN_HPP

#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "latentvision/autodiff.hpp"
#include "latentvision/random.hpp"
#include "latentvision/tensor.hpp"

namespace lvc {

// A named parameter or buffer. Buffers (running stats) are serialized but
// never given to the optimizer.
struct NamedParam {
  std::string name;
  Var var;
  bool trainable = true;
};

using ParamList = std::vector<NamedParam>;

inline void he_init(Tensor& w, int fan_in, Rng& rng) {
  double std = std::sqrt(2.0 / fan_in);
  for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, std);
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv2d {
  Var w, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int k, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    Tensor wt({out_ch, in_ch, k, k});
    he_init(wt, in_ch * k * k, rng);
    w = parameter(std::move(wt));
    b = parameter(Tensor({out_ch}));
  }

  Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
  }
};

struct ConvTranspose2d {
  Var w, b;
  int stride = 1, pad = 0, outpad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(int in_ch, int out_ch, int k, int stride_, int pad_,
                  int outpad_, Rng& rng)
      : stride(stride_), pad(pad_), outpad(outpad_) {
    Tensor wt({in_ch, out_ch, k, k});
    he_init(wt, in_ch * k * k, rng);
    w = parameter(std::move(wt));
    b = parameter(Tensor({out_ch}));
  }

  Var operator()(const Var& x) const {
    return conv_transpose2d(x, w, b, stride, pad, outpad);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
  }
};

struct BatchNorm2d {
  Var gamma, beta;
  Var running_mean, running_var;  // buffers, never trained
  double eps = 1e-5;
  double momentum = 0.1;
  int refresh_count = -1;  // >= 0: cumulative-average stat refresh in progress

  BatchNorm2d() = default;
  explicit BatchNorm2d(int ch, double gamma_init = 1.0) {
    gamma = parameter(Tensor::full({ch}, gamma_init));
    beta = parameter(Tensor({ch}));
    running_mean = constant(Tensor({ch}));
    running_var = constant(Tensor::full({ch}, 1.0));
  }

  Var operator()(const Var& x, bool train) {
    if (train) {
      Tensor mu, var;
      Var y = batchnorm2d_train(x, gamma, beta, eps, &mu, &var);
      Tensor& rm = running_mean->value;
      Tensor& rv = running_var->value;
      double m = momentum;
      if (refresh_count >= 0) m = 1.0 / static_cast<double>(++refresh_count);
      for (int64_t i = 0; i < mu.size(); ++i) {
        rm[i] = (1 - m) * rm[i] + m * mu[i];
        rv[i] = (1 - m) * rv[i] + m * var[i];
      }
      return y;
    }
    return batchnorm2d_eval(x, gamma, beta, running_mean->value,
                            running_var->value, eps);
  }

  // EMA statistics lag the weights they were collected under; a refresh pass
  // replaces them with an exact average over fresh train-mode batches.
  void begin_stat_refresh() { refresh_count = 0; }
  void end_stat_refresh() { refresh_count = -1; }

  void collect(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }
};

struct Dense {
  Var w, b;

  Dense() = default;
  Dense(int in_dim, int out_dim, Rng& rng) {
    Tensor wt({in_dim, out_dim});
    he_init(wt, in_dim, rng);
    w = parameter(std::move(wt));
    b = parameter(Tensor({out_dim}));
  }

  Var operator()(const Var& x) const { return dense(x, w, b); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
  }
};

// Generalized divisive normalization. Parameters are stored unconstrained
// and squared on use, keeping beta/gamma nonnegative with smooth gradients.
//   y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)        (forward)
//   y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2)        (inverse)
struct Gdn {
  Var beta_raw, gamma_raw;
  bool inverse = false;
  int ch = 0;
  static constexpr double kBetaMin = 1e-6;

  Gdn() = default;
  Gdn(int ch_, bool inverse_, Rng& rng) : inverse(inverse_), ch(ch_) {
    beta_raw = parameter(Tensor::full({ch}, 1.0));
    Tensor g({ch, ch, 1, 1});
    for (int i = 0; i < ch; ++i)
      g[static_cast<int64_t>(i) * ch + i] = 0.316;  // sqrt(0.1) on diagonal
    gamma_raw = parameter(std::move(g));
    (void)rng;
  }

  Var operator()(const Var& x) const {
    Var gamma = mul(gamma_raw, gamma_raw);
    Var beta = add_scalar(mul(beta_raw, beta_raw), kBetaMin);
    Var norm = conv2d(mul(x, x), gamma, nullptr, 1, 0);
    norm = bias_add(norm, beta);
    return inverse ? mul(x, sqrt_op(norm)) : mul(x, rsqrt(norm));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".beta_raw", beta_raw, true});
    out.push_back({prefix + ".gamma_raw", gamma_raw, true});
  }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class Adam {
 public:
  explicit Adam(std::vector<Var> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2),
        eps_(eps) {
    for (auto& p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_)
      if (!p->grad.empty()) p->grad.fill(0.0);
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p->grad.empty()) continue;
      for (int64_t j = 0; j < p->value.size(); ++j) {
        double g = p->grad[j];
        m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * g;
        v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * g * g;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        p->value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Var> params_;
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Parameter blob serialization
// ---------------------------------------------------------------------------

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("truncated blob");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_params(std::ostream& os, const ParamList& params) {
  write_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    write_u32(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Tensor& t = p.var->value;
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

inline std::map<std::string, Tensor> read_params(std::istream& is) {
  std::map<std::string, Tensor> out;
  uint32_t count = read_u32(is);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = read_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_u32(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated blob");
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

// Copies stored values into live parameters by name.
inline void assign_params(const ParamList& params,
                          const std::map<std::string, Tensor>& blobs) {
  for (const auto& p : params) {
    auto it = blobs.find(p.name);
    if (it == blobs.end())
      throw std::runtime_error("missing parameter in checkpoint: " + p.name);
    if (it->second.shape() != p.var->value.shape())
      throw std::runtime_error("parameter shape mismatch: " + p.name);
    p.var->value = it->second;
  }
}

inline std::vector<Var> trainable_only(const ParamList& params) {
  std::vector<Var> out;
  for (const auto& p : params)
    if (p.trainable) out.push_back(p.var);
  return out;
}

// FNV-1a over the serialized parameter bytes; used for frozen-weight checks.
inline uint64_t params_hash(const ParamList& params) {
  uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix_bytes(p.name.data(), p.name.size());
    mix_bytes(p.var->value.data(),
              static_cast<size_t>(p.var->value.size()) * sizeof(double));
  }
  return h;
}

}  // namespace lvc

#endif  // LATENTVISION_NN_HPP
