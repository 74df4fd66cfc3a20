#ifndef LATENTVISION_CLASSIFIER_HPP
#define LATENTVISION_CLASSIFIER_HPP

#include <algorithm>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentvision/codec.hpp"
#include "latentvision/nn.hpp"

namespace lvc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct StageSpec {
  int c1 = 0, c2 = 0, c3 = 0;  // bottleneck widths
  int repeat = 1;
  int stride = 1;  // applied at the first block of the stage
};

struct ClassifierConfig {
  int num_classes = 23;
  int latent_channels = 192;  // 192 or 320
  int stem_width = 32;
  int stem_out = 128;
  bool log_sigma_input = false;  // feed log(sigma) instead of raw sigma
  std::vector<StageSpec> trunk = default_trunk();

  static std::vector<StageSpec> default_trunk() {
    return {
        {128, 128, 512, 4, 2},    // conv_3x
        {256, 256, 1024, 6, 2},   // conv_4x
        {512, 512, 2048, 3, 2},   // conv_5x
    };
  }

  // Uniformly thinner trunk and stems for desk-scale runs.
  ClassifierConfig scaled(int divisor) const {
    ClassifierConfig c = *this;
    auto shrink = [divisor](int v) { return std::max(4, v / divisor); };
    c.stem_width = shrink(c.stem_width);
    c.stem_out = shrink(c.stem_out);
    for (auto& s : c.trunk) {
      s.c1 = shrink(s.c1);
      s.c2 = shrink(s.c2);
      s.c3 = shrink(s.c3);
    }
    return c;
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (latent_channels != 192 && latent_channels != 320)
      throw ConfigError("latent_channels must be 192 or 320");
    if (trunk.empty()) throw ConfigError("trunk must not be empty");
  }

  nlohmann::json to_json() const {
    nlohmann::json trunk_j = nlohmann::json::array();
    for (const auto& s : trunk)
      trunk_j.push_back({s.c1, s.c2, s.c3, s.repeat, s.stride});
    return {{"num_classes", num_classes},
            {"latent_channels", latent_channels},
            {"stem_width", stem_width},
            {"stem_out", stem_out},
            {"log_sigma_input", log_sigma_input},
            {"trunk", trunk_j}};
  }

  static ClassifierConfig from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    c.num_classes = j.at("num_classes").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.stem_width = j.at("stem_width").get<int>();
    c.stem_out = j.at("stem_out").get<int>();
    c.log_sigma_input = j.value("log_sigma_input", false);
    c.trunk.clear();
    for (const auto& s : j.at("trunk")) {
      c.trunk.push_back({s.at(0).get<int>(), s.at(1).get<int>(),
                         s.at(2).get<int>(), s.at(3).get<int>(),
                         s.at(4).get<int>()});
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Bottleneck block
// ---------------------------------------------------------------------------

struct Bottleneck {
  Conv2d c1, c2, c3;
  BatchNorm2d bn1, bn2, bn3;
  Conv2d proj;
  BatchNorm2d bn_proj;
  bool has_proj = false;

  Bottleneck() = default;
  Bottleneck(int in_ch, int w1, int w2, int out_ch, int stride, Rng& rng) {
    c1 = Conv2d(in_ch, w1, 1, 1, 0, rng);
    bn1 = BatchNorm2d(w1);
    c2 = Conv2d(w1, w2, 3, stride, 1, rng);
    bn2 = BatchNorm2d(w2);
    c3 = Conv2d(w2, out_ch, 1, 1, 0, rng);
    // Residual branch starts as identity: last BN scale is zero-initialized.
    bn3 = BatchNorm2d(out_ch, 0.0);
    has_proj = (in_ch != out_ch || stride != 1);
    if (has_proj) {
      proj = Conv2d(in_ch, out_ch, 1, stride, 0, rng);
      bn_proj = BatchNorm2d(out_ch);
    }
  }

  Var operator()(const Var& x, bool train) {
    Var h = relu(bn1(c1(x), train));
    h = relu(bn2(c2(h), train));
    h = bn3(c3(h), train);
    Var sc = has_proj ? bn_proj(proj(x), train) : x;
    return relu(add(h, sc));
  }

  void bns(std::vector<BatchNorm2d*>& out) {
    out.push_back(&bn1);
    out.push_back(&bn2);
    out.push_back(&bn3);
    if (has_proj) out.push_back(&bn_proj);
  }

  void collect(ParamList& out, const std::string& prefix) {
    c1.collect(out, prefix + ".c1");
    bn1.collect(out, prefix + ".bn1");
    c2.collect(out, prefix + ".c2");
    bn2.collect(out, prefix + ".bn2");
    c3.collect(out, prefix + ".c3");
    bn3.collect(out, prefix + ".bn3");
    if (has_proj) {
      proj.collect(out, prefix + ".proj");
      bn_proj.collect(out, prefix + ".bn_proj");
    }
  }
};

// ---------------------------------------------------------------------------
// cResNet: dual latent stems, bottleneck trunk, pooled softmax head
// ---------------------------------------------------------------------------

class CResNet {
 public:
  ClassifierConfig cfg;

  CResNet(const ClassifierConfig& config, uint64_t seed) : cfg(config) {
    Rng rng(Rng::mix(seed, 0xC1A55));
    // No stem convolution before the residual blocks; the two parallel
    // bottlenecks consume y_hat and sigma_hat directly.
    stem_y_ = Bottleneck(cfg.latent_channels, cfg.stem_width, cfg.stem_width,
                         cfg.stem_out, 1, rng);
    stem_s_ = Bottleneck(cfg.latent_channels, cfg.stem_width, cfg.stem_width,
                         cfg.stem_out, 1, rng);
    int ch = 2 * cfg.stem_out;
    for (const auto& st : cfg.trunk) {
      for (int r = 0; r < st.repeat; ++r) {
        int stride = (r == 0) ? st.stride : 1;
        trunk_.emplace_back(ch, st.c1, st.c2, st.c3, stride, rng);
        ch = st.c3;
      }
    }
    head_ = Dense(ch, cfg.num_classes, rng);
  }

  // y, sigma: [B, latent_channels, 28, 28] -> logits [B, num_classes]
  Var forward(const Var& y, const Var& sigma, bool train) {
    check_input(y->value);
    check_input(sigma->value);
    Var s_in = cfg.log_sigma_input ? log_op(sigma) : sigma;
    Var a = stem_y_(y, train);
    Var b = stem_s_(s_in, train);
    Var h = concat_channels(a, b);
    for (auto& blk : trunk_) h = blk(h, train);
    return head_(global_avg_pool(h));
  }

  std::vector<BatchNorm2d*> bn_layers() {
    std::vector<BatchNorm2d*> out;
    stem_y_.bns(out);
    stem_s_.bns(out);
    for (auto& blk : trunk_) blk.bns(out);
    return out;
  }

  ParamList parameters() {
    ParamList out;
    stem_y_.collect(out, "stem_y");
    stem_s_.collect(out, "stem_s");
    for (size_t i = 0; i < trunk_.size(); ++i)
      trunk_[i].collect(out, "trunk." + std::to_string(i));
    head_.collect(out, "head");
    return out;
  }

 private:
  void check_input(const Tensor& t) const {
    if (t.rank() != 4 || t.dim(1) != cfg.latent_channels)
      throw ConfigError("classifier: expected [B," +
                        std::to_string(cfg.latent_channels) + ",28,28]");
    if (t.dim(2) != 28 || t.dim(3) != 28)
      throw std::invalid_argument(
          "classifier: spatial dims must be 28x28 (augmentation contract)");
  }

  Bottleneck stem_y_, stem_s_;
  std::vector<Bottleneck> trunk_;
  Dense head_;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Fraction (in percent) of rows whose label is among the k largest logits.
// Ties broken toward the lower class index.
inline double top_k_accuracy(const Tensor& logits,
                             const std::vector<int>& labels, int k) {
  const int N = logits.dim(0), K = logits.dim(1);
  if (k > K) throw std::invalid_argument("top_k_accuracy: k > num_classes");
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("top_k_accuracy: label count mismatch");
  int correct = 0;
  std::vector<int> order(static_cast<size_t>(K));
  for (int n = 0; n < N; ++n) {
    const double* l = logits.data() + static_cast<int64_t>(n) * K;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [l](int a, int b) {
      if (l[a] != l[b]) return l[a] > l[b];
      return a < b;
    });
    for (int i = 0; i < k; ++i)
      if (order[static_cast<size_t>(i)] == labels[static_cast<size_t>(n)]) {
        ++correct;
        break;
      }
  }
  return 100.0 * correct / N;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline uint64_t config_hash(const nlohmann::json& j) {
  std::string s = j.dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline void save_classifier(const std::string& path, CResNet& model) {
  nlohmann::json cfg = model.cfg.to_json();
  cfg["type"] = "classifier";
  cfg["config_hash"] = config_hash(model.cfg.to_json());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("LVCW", 4);
  std::string j = cfg.dump();
  write_u32(os, static_cast<uint32_t>(j.size()));
  os.write(j.data(), static_cast<std::streamsize>(j.size()));
  write_params(os, model.parameters());
}

inline CResNet load_classifier(const std::string& path) {
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
  if (cfg.value("type", "") != "classifier")
    throw std::runtime_error("checkpoint is not a classifier: " + path);
  CResNet model(ClassifierConfig::from_json(cfg), 0);
  assign_params(model.parameters(), read_params(is));
  return model;
}

}  // namespace lvc

#endif  // LATENTVISION_CLASSIFIER_HPP
