#ifndef LATENTVISION_TRAIN_HPP
#define LATENTVISION_TRAIN_HPP

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentvision/classifier.hpp"
#include "latentvision/codec.hpp"
#include "latentvision/dataset.hpp"

namespace lvc {

// ---------------------------------------------------------------------------
// Configuration and metrics
// ---------------------------------------------------------------------------

enum class TrainMode { kCodec, kFrozen, kJoint };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kCodec: return "codec";
    case TrainMode::kFrozen: return "frozen";
    default: return "joint";
  }
}

inline TrainMode mode_from_name(const std::string& s) {
  if (s == "codec") return TrainMode::kCodec;
  if (s == "frozen") return TrainMode::kFrozen;
  if (s == "joint") return TrainMode::kJoint;
  throw ConfigError("unknown mode: " + s);
}

struct JointLossWeights {
  double task = 1.0;
  double rate = 0.0;  // the combined objective diverges; off by default
  double dist = 0.0;
};

struct TrainConfig {
  TrainMode mode = TrainMode::kFrozen;
  int quality_index = 8;
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  double rd_weight = 0.0;  // 0 = take the quality default (codec mode)
  JointLossWeights joint_weights;
  int classifier_width_divisor = 1;  // 1 = full Table-2 widths
  int codec_internal_channels = 64;
  bool log_sigma_input = false;

  void validate() const {
    if (quality_index != 1 && quality_index != 4 && quality_index != 8)
      throw ConfigError("quality_index must be one of {1,4,8}");
    if (epochs < 1 || batch_size < 1)
      throw ConfigError("epochs and batch_size must be positive");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (mode == TrainMode::kCodec && rd_weight != 0.0 && !(rd_weight > 0))
      throw ConfigError("rd_weight must be positive");
    if (joint_weights.task < 0 || joint_weights.rate < 0 ||
        joint_weights.dist < 0)
      throw ConfigError("joint loss weights must be nonnegative");
  }
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_top1 = 0;
  double val_top5 = 0;
  double mean_bpp = 0;
};

struct RunMetrics {
  std::vector<EpochRow> rows;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  double best_top1 = 0;
  int best_epoch = 0;
  double wall_time_sec = 0;  // reported in logs only, never in artifacts

  void record(const EpochRow& row) {
    rows.push_back(row);
    if (rows.size() == 1 || row.val_top1 > best_top1) {
      best_top1 = row.val_top1;
      best_epoch = row.epoch;
    }
  }

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "epoch,train_loss,val_loss,val_top1,val_top5,mean_bpp\n";
    os << std::setprecision(10);
    for (const auto& r : rows)
      os << r.epoch << "," << r.train_loss << "," << r.val_loss << ","
         << r.val_top1 << "," << r.val_top5 << "," << r.mean_bpp << "\n";
  }

  nlohmann::json summary_json() const {
    return {{"epochs", rows.size()},
            {"seed", seed},
            {"config_hash", config_hash},
            {"best_top1", best_top1},
            {"best_epoch", best_epoch},
            {"final_top1", rows.empty() ? 0.0 : rows.back().val_top1},
            {"final_top5", rows.empty() ? 0.0 : rows.back().val_top5},
            {"final_mean_bpp", rows.empty() ? 0.0 : rows.back().mean_bpp}};
  }
};

// lambda_task*task + lambda_rate*rate + lambda_dist*distortion.
inline double loss_combined(double task_loss, double rate_bpp,
                            double distortion_mse,
                            const JointLossWeights& w) {
  return w.task * task_loss + w.rate * rate_bpp + w.dist * distortion_mse;
}

inline Var loss_combined(const Var& task_loss, const Var& rate_bpp,
                         const Var& distortion_mse,
                         const JointLossWeights& w) {
  Var total = scale(task_loss, w.task);
  if (w.rate != 0) total = add(total, scale(rate_bpp, w.rate));
  if (w.dist != 0) total = add(total, scale(distortion_mse, w.dist));
  return total;
}

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Codec pretraining
// ---------------------------------------------------------------------------

struct LabeledImage {
  Tensor image;  // [3,H,W]
  int class_id = 0;
};

inline std::vector<LabeledImage> load_split_images(const DatasetIndex& index,
                                                   Split split) {
  std::vector<LabeledImage> out;
  for (const auto& e : index.entries) {
    if (e.split != split) continue;
    Tensor img = reflect_pad_to_multiple(load_image(e.path), 64);
    out.push_back({std::move(img), e.class_id});
  }
  return out;
}

inline Tensor stack_images(const std::vector<LabeledImage>& images,
                           const std::vector<size_t>& idx, size_t from,
                           size_t n) {
  const Tensor& first = images[idx[from]].image;
  Tensor out({static_cast<int>(n), 3, first.dim(1), first.dim(2)});
  for (size_t b = 0; b < n; ++b) {
    const Tensor& img = images[idx[from + b]].image;
    if (!img.same_shape(first))
      throw std::invalid_argument("stack_images: inconsistent dims");
    std::copy_n(img.data(), img.size(),
                out.data() + out.idx4(static_cast<int>(b), 0, 0, 0));
  }
  return out;
}

// Minimizes rd_weight * MSE + bpp with additive-noise quantization.
inline RunMetrics pretrain_codec(const TrainConfig& cfg, CodecModel& model,
                                 const std::vector<LabeledImage>& train_set,
                                 const std::vector<LabeledImage>& val_set,
                                 bool verbose = false) {
  cfg.validate();
  if (cfg.mode != TrainMode::kCodec)
    throw ConfigError("pretrain_codec: mode must be codec");
  double lambda = cfg.rd_weight > 0 ? cfg.rd_weight : model.q.rd_weight;
  RunMetrics metrics;
  metrics.seed = cfg.seed;

  ParamList params = model.parameters();
  Adam opt(trainable_only(params), cfg.learning_rate);
  Rng data_rng(Rng::mix(cfg.seed, 0xDA7A));
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(data_rng.uniform_int(
                                  static_cast<int64_t>(i)))]);
    double loss_sum = 0;
    int batches = 0;
    for (size_t pos = 0; pos < order.size();
         pos += static_cast<size_t>(cfg.batch_size)) {
      size_t n = std::min(static_cast<size_t>(cfg.batch_size),
                          order.size() - pos);
      Tensor x = stack_images(train_set, order, pos, n);
      const double pixels = static_cast<double>(x.size()) / 3.0;
      Var xv = constant(x);
      Var y = model.analysis(xv);
      Var y_noisy = add(y, constant(uniform_noise_like(y->value, data_rng)));
      Var z = model.hyper_analysis(y);
      Var z_noisy = add(z, constant(uniform_noise_like(z->value, data_rng)));
      Var sigma = model.hyper_synthesis(z_noisy);
      Var recon = model.synthesis_raw(y_noisy);
      Var dist = mean(square(sub(recon, xv)));
      Var bits = add(model.rate_y(y_noisy, sigma), model.rate_z(z_noisy));
      Var bpp = scale(bits, 1.0 / pixels);
      Var loss = add(scale(dist, lambda), bpp);
      double lv = loss->value[0];
      if (!std::isfinite(lv))
        throw DivergenceError("codec training diverged (non-finite loss) at epoch " +
                              std::to_string(epoch));
      opt.zero_grad();
      backward(loss);
      opt.step();
      loss_sum += lv;
      ++batches;
    }

    // Validation bpp and distortion with round quantization.
    double val_bpp = 0, val_mse = 0;
    {
      NoGradGuard ng;
      for (const auto& li : val_set) {
        Tensor x4({1, 3, li.image.dim(1), li.image.dim(2)},
                  std::vector<double>(li.image.data(),
                                      li.image.data() + li.image.size()));
        Var xv = constant(x4);
        Var y = model.analysis(xv);
        Tensor y_hat = quantize(y->value, QuantizeMode::kRound);
        Var z = model.hyper_analysis(y);
        Tensor z_hat = quantize(z->value, QuantizeMode::kRound);
        Var sigma = model.hyper_synthesis(constant(z_hat));
        double bits = model.rate_estimate(y_hat, sigma->value, z_hat);
        val_bpp += bits / (li.image.dim(1) * li.image.dim(2));
        Var recon = model.synthesis(constant(y_hat));
        Var mse = mean(square(sub(recon, xv)));
        val_mse += mse->value[0];
      }
      if (!val_set.empty()) {
        val_bpp /= static_cast<double>(val_set.size());
        val_mse /= static_cast<double>(val_set.size());
      }
    }
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / std::max(batches, 1);
    row.val_loss = lambda * val_mse + val_bpp;
    row.mean_bpp = val_bpp;
    metrics.record(row);
    if (verbose)
      std::cerr << "codec epoch " << epoch << " loss " << row.train_loss
                << " val_bpp " << val_bpp << " val_mse " << val_mse << "\n";
  }
  return metrics;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double top1 = 0;
  double top5 = 0;
  double mean_bpp = 0;
  std::vector<double> per_class_accuracy;
};

inline EvalResult evaluate(CResNet& model, const LatentStore& store,
                           int batch_size = 32) {
  if (store.records.empty()) throw std::runtime_error("evaluate: empty split");
  NoGradGuard ng;
  BatchIterator it(store, batch_size, 0, 0, /*train=*/false);
  Batch b;
  int total = 0;
  double top1_hits = 0, top5_hits = 0, bpp_sum = 0;
  std::vector<int> class_total(static_cast<size_t>(store.num_classes), 0);
  std::vector<int> class_hits(static_cast<size_t>(store.num_classes), 0);
  while (it.next(b)) {
    Var logits = model.forward(constant(b.y), constant(b.sigma), false);
    const int n = static_cast<int>(b.labels.size());
    int k5 = std::min(5, model.cfg.num_classes);
    top1_hits += top_k_accuracy(logits->value, b.labels, 1) * n / 100.0;
    top5_hits += top_k_accuracy(logits->value, b.labels, k5) * n / 100.0;
    // Per-class top-1.
    const int K = model.cfg.num_classes;
    for (int i = 0; i < n; ++i) {
      const double* l = logits->value.data() + static_cast<int64_t>(i) * K;
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (l[k] > l[arg]) arg = k;
      class_total[static_cast<size_t>(b.labels[static_cast<size_t>(i)])]++;
      if (arg == b.labels[static_cast<size_t>(i)])
        class_hits[static_cast<size_t>(arg)]++;
    }
    bpp_sum += b.mean_bpp * n;
    total += n;
  }
  EvalResult r;
  r.top1 = 100.0 * top1_hits / total;
  r.top5 = 100.0 * top5_hits / total;
  r.mean_bpp = bpp_sum / total;
  for (size_t c = 0; c < class_total.size(); ++c)
    r.per_class_accuracy.push_back(
        class_total[c] ? 100.0 * class_hits[c] / class_total[c] : 0.0);
  return r;
}

// ---------------------------------------------------------------------------
// Frozen-encoder classifier training
// ---------------------------------------------------------------------------

struct FrozenResult {
  RunMetrics metrics;
  std::map<std::string, Tensor> best_weights;  // by val top-1
};

inline double train_epoch_frozen(CResNet& model, Adam& opt,
                                 const LatentStore& store,
                                 const TrainConfig& cfg, int epoch) {
  BatchIterator it(store, cfg.batch_size, cfg.seed, epoch, /*train=*/true);
  Batch b;
  double loss_sum = 0;
  int batches = 0;
  while (it.next(b)) {
    Var logits = model.forward(constant(b.y), constant(b.sigma), true);
    Var loss = softmax_cross_entropy(logits, b.labels);
    double lv = loss->value[0];
    if (!std::isfinite(lv)) throw DivergenceError("classifier loss non-finite");
    opt.zero_grad();
    backward(loss);
    opt.step();
    loss_sum += lv;
    ++batches;
  }
  return loss_sum / std::max(batches, 1);
}

// Replaces the BN running statistics with an exact average over one
// train-mode pass; the EMA alone lags the weights enough after a fast epoch
// to wreck eval-mode predictions.
inline void refresh_bn_stats(CResNet& model, const LatentStore& store,
                             int batch_size, uint64_t seed, int epoch) {
  NoGradGuard ng;
  auto bns = model.bn_layers();
  for (auto* bn : bns) bn->begin_stat_refresh();
  BatchIterator it(store, batch_size, seed, epoch, /*train=*/true);
  Batch b;
  while (it.next(b))
    model.forward(constant(b.y), constant(b.sigma), true);
  for (auto* bn : bns) bn->end_stat_refresh();
}

inline double val_loss_of(CResNet& model, const LatentStore& store,
                          int batch_size) {
  NoGradGuard ng;
  BatchIterator it(store, batch_size, 0, 0, false);
  Batch b;
  double loss_sum = 0;
  int total = 0;
  while (it.next(b)) {
    Var logits = model.forward(constant(b.y), constant(b.sigma), false);
    Var loss = softmax_cross_entropy(logits, b.labels);
    loss_sum += loss->value[0] * static_cast<double>(b.labels.size());
    total += static_cast<int>(b.labels.size());
  }
  return loss_sum / total;
}

// Only classifier parameters receive gradients; the caller's codec weights
// are never touched (assertable via params_hash).
inline FrozenResult train_frozen(const TrainConfig& cfg, CResNet& model,
                                 const LatentStore& store_train,
                                 const LatentStore& store_val,
                                 bool verbose = false) {
  cfg.validate();
  if (cfg.mode != TrainMode::kFrozen)
    throw ConfigError("train_frozen: mode must be frozen");
  if (!store_train.records.empty() &&
      store_train.records.front().y_hat.dim(0) != model.cfg.latent_channels)
    throw ConfigError("train_frozen: store channels do not match classifier");

  FrozenResult result;
  result.metrics.seed = cfg.seed;
  result.metrics.config_hash = config_hash(model.cfg.to_json());
  Adam opt(trainable_only(model.parameters()), cfg.learning_rate);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = train_epoch_frozen(model, opt, store_train, cfg, epoch);
    refresh_bn_stats(model, store_train, cfg.batch_size, cfg.seed, epoch);
    EvalResult ev = evaluate(model, store_val, cfg.batch_size);
    row.val_loss = val_loss_of(model, store_val, cfg.batch_size);
    row.val_top1 = ev.top1;
    row.val_top5 = ev.top5;
    row.mean_bpp = ev.mean_bpp;
    bool is_best = result.metrics.rows.empty() ||
                   row.val_top1 > result.metrics.best_top1;
    result.metrics.record(row);
    if (is_best) {
      result.best_weights.clear();
      for (const auto& p : model.parameters())
        result.best_weights.emplace(p.name, p.var->value);
    }
    if (verbose)
      std::cerr << "frozen epoch " << epoch << " loss " << row.train_loss
                << " val_top1 " << row.val_top1 << "\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// Joint encoder + classifier fine-tuning
// ---------------------------------------------------------------------------

// Latents are recomputed from images every step with straight-through
// rounding; g_a, h_a, h_s and the classifier move, the synthesis transform
// and the factorized prior stay frozen.
inline RunMetrics train_joint(const TrainConfig& cfg, CodecModel& codec,
                              CResNet& model,
                              const std::vector<LabeledImage>& train_set,
                              const std::vector<LabeledImage>& val_set,
                              bool verbose = false) {
  cfg.validate();
  if (cfg.mode != TrainMode::kJoint)
    throw ConfigError("train_joint: mode must be joint");
  RunMetrics metrics;
  metrics.seed = cfg.seed;
  metrics.config_hash = config_hash(model.cfg.to_json());

  ParamList moving = codec.encoder_parameters();
  for (const auto& p : model.parameters()) moving.push_back(p);
  Adam opt(trainable_only(moving), cfg.learning_rate);
  Rng data_rng(Rng::mix(cfg.seed, 0x907A1));
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  // Last-good snapshot for NaN recovery.
  auto snapshot = [&]() {
    std::map<std::string, Tensor> snap;
    for (const auto& p : moving) snap.emplace(p.name, p.var->value);
    return snap;
  };
  std::map<std::string, Tensor> last_good = snapshot();

  auto eval_joint = [&](const std::vector<LabeledImage>& set, double* top1,
                        double* top5, double* bpp, double* loss_out) {
    NoGradGuard ng;
    double t1 = 0, t5 = 0, bsum = 0, lsum = 0;
    int total = 0;
    Rng dummy(0);
    for (size_t pos = 0; pos < set.size();
         pos += static_cast<size_t>(cfg.batch_size)) {
      size_t n = std::min(static_cast<size_t>(cfg.batch_size),
                          set.size() - pos);
      std::vector<size_t> idx(n);
      for (size_t i = 0; i < n; ++i) idx[i] = pos + i;
      std::vector<size_t> all(set.size());
      for (size_t i = 0; i < all.size(); ++i) all[i] = i;
      Tensor x = stack_images(set, all, pos, n);
      std::vector<int> labels(n);
      for (size_t i = 0; i < n; ++i) labels[i] = set[pos + i].class_id;
      const double pixels = static_cast<double>(x.size()) / 3.0;
      Var xv = constant(x);
      Var y = codec.analysis(xv);
      Var y_hat = round_ste(y);
      Var z = codec.hyper_analysis(y);
      Var z_hat = round_ste(z);
      Var sigma = codec.hyper_synthesis(z_hat);
      auto [ya, sa] = augment(y_hat, sigma, dummy, /*train=*/false);
      Var logits = model.forward(ya, sa, false);
      Var loss = softmax_cross_entropy(logits, labels);
      double bits = codec.rate_estimate(y_hat->value, sigma->value,
                                        z_hat->value);
      bsum += bits / pixels * static_cast<double>(n);
      int k5 = std::min(5, model.cfg.num_classes);
      t1 += top_k_accuracy(logits->value, labels, 1) * n / 100.0;
      t5 += top_k_accuracy(logits->value, labels, k5) * n / 100.0;
      lsum += loss->value[0] * static_cast<double>(n);
      total += static_cast<int>(n);
    }
    *top1 = 100.0 * t1 / total;
    *top5 = 100.0 * t5 / total;
    *bpp = bsum / total;
    *loss_out = lsum / total;
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(data_rng.uniform_int(
                                  static_cast<int64_t>(i)))]);
    double loss_sum = 0;
    int batches = 0;
    for (size_t pos = 0; pos < order.size();
         pos += static_cast<size_t>(cfg.batch_size)) {
      size_t n = std::min(static_cast<size_t>(cfg.batch_size),
                          order.size() - pos);
      Tensor x = stack_images(train_set, order, pos, n);
      std::vector<int> labels(n);
      for (size_t i = 0; i < n; ++i)
        labels[i] = train_set[order[pos + i]].class_id;
      const double pixels = static_cast<double>(x.size()) / 3.0;
      Var xv = constant(x);
      Var y = codec.analysis(xv);
      Var y_hat = round_ste(y);
      Var z = codec.hyper_analysis(y);
      Var z_hat = round_ste(z);
      Var sigma = codec.hyper_synthesis(z_hat);
      auto [ya, sa] = augment(y_hat, sigma, data_rng, /*train=*/true);
      Var logits = model.forward(ya, sa, true);
      Var task = softmax_cross_entropy(logits, labels);
      Var loss = task;
      if (cfg.joint_weights.rate != 0 || cfg.joint_weights.dist != 0 ||
          cfg.joint_weights.task != 1) {
        Var bits = add(codec.rate_y(y_hat, sigma), codec.rate_z(z_hat));
        Var bpp = scale(bits, 1.0 / pixels);
        Var dist = cfg.joint_weights.dist != 0
                       ? mean(square(sub(codec.synthesis_raw(y_hat), xv)))
                       : constant(Tensor::scalar(0.0));
        loss = loss_combined(task, bpp, dist, cfg.joint_weights);
      }
      double lv = loss->value[0];
      if (!std::isfinite(lv)) {
        // Restore the last-good weights and stop.
        for (const auto& p : moving) {
          auto it = last_good.find(p.name);
          if (it != last_good.end()) p.var->value = it->second;
        }
        throw DivergenceError("joint training diverged; last-good restored");
      }
      opt.zero_grad();
      backward(loss);
      opt.step();
      loss_sum += lv;
      ++batches;
    }
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / std::max(batches, 1);
    {
      // Same BN stat refresh as the frozen path, through the live encoder.
      NoGradGuard ng;
      auto bns = model.bn_layers();
      for (auto* bn : bns) bn->begin_stat_refresh();
      Rng aug_rng(Rng::mix(cfg.seed, static_cast<uint64_t>(epoch)));
      for (size_t pos = 0; pos < order.size();
           pos += static_cast<size_t>(cfg.batch_size)) {
        size_t n = std::min(static_cast<size_t>(cfg.batch_size),
                            order.size() - pos);
        Tensor x = stack_images(train_set, order, pos, n);
        Var y = codec.analysis(constant(x));
        Var y_hat = round_ste(y);
        Var sigma = codec.hyper_synthesis(round_ste(codec.hyper_analysis(y)));
        auto [ya, sa] = augment(y_hat, sigma, aug_rng, /*train=*/true);
        model.forward(ya, sa, true);
      }
      for (auto* bn : bns) bn->end_stat_refresh();
    }
    eval_joint(val_set, &row.val_top1, &row.val_top5, &row.mean_bpp,
               &row.val_loss);
    metrics.record(row);
    last_good = snapshot();
    if (verbose)
      std::cerr << "joint epoch " << epoch << " loss " << row.train_loss
                << " val_top1 " << row.val_top1 << "\n";
  }
  return metrics;
}

}  // namespace lvc

#endif  // LATENTVISION_TRAIN_HPP
