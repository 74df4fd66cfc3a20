#ifndef LATENTVISION_DATASET_HPP
#define LATENTVISION_DATASET_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "latentvision/codec.hpp"
#include "latentvision/image_io.hpp"
#include "latentvision/random.hpp"

namespace lvc {

enum class Split { kTrain, kVal, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::runtime_error("unknown split name: " + s);
}

struct DatasetEntry {
  std::string path;  // absolute or root-relative path
  int class_id = 0;
  Split split = Split::kTrain;
};

struct DatasetIndex {
  std::vector<std::string> classes;
  std::vector<DatasetEntry> entries;

  int num_classes() const { return static_cast<int>(classes.size()); }

  std::vector<int> per_class_counts(Split s) const {
    std::vector<int> counts(classes.size(), 0);
    for (const auto& e : entries)
      if (e.split == s) counts[static_cast<size_t>(e.class_id)]++;
    return counts;
  }

  int count(Split s) const {
    int n = 0;
    for (const auto& e : entries)
      if (e.split == s) ++n;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

// Manifest format: one "relative_path<TAB>class<TAB>split" line per image.
inline DatasetIndex ingest_manifest(const std::string& root,
                                    const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot read manifest: " + manifest_path);
  DatasetIndex idx;
  std::map<std::string, int> class_ids;
  std::string line;
  std::vector<std::tuple<std::string, std::string, std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string rel, cls, split;
    if (!std::getline(ss, rel, '\t') || !std::getline(ss, cls, '\t') ||
        !std::getline(ss, split))
      throw std::runtime_error("malformed manifest line: " + line);
    rows.emplace_back(rel, cls, split);
    class_ids.emplace(cls, 0);
  }
  int next = 0;
  for (auto& [name, id] : class_ids) {
    id = next++;
    idx.classes.push_back(name);
  }
  for (const auto& [rel, cls, split] : rows)
    idx.entries.push_back(
        {root + "/" + rel, class_ids.at(cls), split_from_name(split)});
  std::stable_sort(idx.entries.begin(), idx.entries.end(),
                   [](const DatasetEntry& a, const DatasetEntry& b) {
                     return a.path < b.path;
                   });
  return idx;
}

// Directory-per-class layout with a seeded stratified split.
inline DatasetIndex ingest_directory(const std::string& root, uint64_t seed,
                                     double train_frac = 0.8,
                                     double val_frac = 0.1) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root))
    throw std::runtime_error("dataset root is not a directory: " + root);
  DatasetIndex idx;
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw std::runtime_error("no class directories under " + root);
  for (int cls = 0; cls < static_cast<int>(class_dirs.size()); ++cls) {
    idx.classes.push_back(class_dirs[static_cast<size_t>(cls)]);
    std::vector<std::string> files;
    for (const auto& f :
         fs::directory_iterator(root + "/" + class_dirs[static_cast<size_t>(cls)]))
      if (f.is_regular_file()) files.push_back(f.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw std::runtime_error("empty class directory: " +
                               class_dirs[static_cast<size_t>(cls)]);
    // Stratified shuffle within the class.
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(cls) + 101));
    for (size_t i = files.size(); i > 1; --i)
      std::swap(files[i - 1],
                files[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    size_t n = files.size();
    size_t n_train = static_cast<size_t>(train_frac * n);
    size_t n_val = static_cast<size_t>(val_frac * n);
    if (n_train == 0) n_train = 1;
    for (size_t i = 0; i < n; ++i) {
      Split s = i < n_train
                    ? Split::kTrain
                    : (i < n_train + n_val ? Split::kVal : Split::kTest);
      idx.entries.push_back({files[i], cls, s});
    }
  }
  std::stable_sort(idx.entries.begin(), idx.entries.end(),
                   [](const DatasetEntry& a, const DatasetEntry& b) {
                     return a.path < b.path;
                   });
  return idx;
}

inline DatasetIndex ingest(const std::string& root,
                           const std::string& manifest = "",
                           uint64_t seed = 0) {
  if (!manifest.empty()) return ingest_manifest(root, manifest);
  std::string default_manifest = root + "/manifest.tsv";
  if (std::filesystem::exists(default_manifest))
    return ingest_manifest(root, default_manifest);
  return ingest_directory(root, seed);
}

// ---------------------------------------------------------------------------
// Latent store
// ---------------------------------------------------------------------------

struct LatentRecord {
  Tensor y_hat;      // [C,h,w] integer-valued
  Tensor sigma_hat;  // [C,h,w]
  int class_id = 0;
  std::string source;
  double bpp = 0.0;  // of the source image's bitstream
};

struct LatentStore {
  int quality_index = 0;
  int num_classes = 0;
  std::vector<LatentRecord> records;
};

// On-disk layout: magic "LVST" | version u8 | quality u8 | num_classes u16 |
// count u32 | records. Record: class u16 | src_len u16 | src | c,h,w u16 |
// bpp f32 | y int16[] | sigma f32[].
inline void write_store(const std::string& path, const LatentStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write("LVST", 4);
  os.put(1);
  os.put(static_cast<char>(store.quality_index));
  auto put_u16 = [&os](uint16_t v) {
    os.put(static_cast<char>(v & 0xFF));
    os.put(static_cast<char>(v >> 8));
  };
  put_u16(static_cast<uint16_t>(store.num_classes));
  write_u32(os, static_cast<uint32_t>(store.records.size()));
  for (const auto& r : store.records) {
    put_u16(static_cast<uint16_t>(r.class_id));
    put_u16(static_cast<uint16_t>(r.source.size()));
    os.write(r.source.data(), static_cast<std::streamsize>(r.source.size()));
    put_u16(static_cast<uint16_t>(r.y_hat.dim(0)));
    put_u16(static_cast<uint16_t>(r.y_hat.dim(1)));
    put_u16(static_cast<uint16_t>(r.y_hat.dim(2)));
    float bpp = static_cast<float>(r.bpp);
    os.write(reinterpret_cast<const char*>(&bpp), 4);
    for (int64_t i = 0; i < r.y_hat.size(); ++i) {
      int16_t v = static_cast<int16_t>(std::llround(r.y_hat[i]));
      os.write(reinterpret_cast<const char*>(&v), 2);
    }
    for (int64_t i = 0; i < r.sigma_hat.size(); ++i) {
      float v = static_cast<float>(r.sigma_hat[i]);
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
}

inline LatentStore read_store(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LVST", 4) != 0)
    throw std::runtime_error("not a latent store: " + path);
  int version = is.get();
  if (version != 1) throw std::runtime_error("unsupported store version");
  LatentStore store;
  store.quality_index = is.get();
  auto get_u16 = [&is]() {
    int a = is.get(), b = is.get();
    if (a < 0 || b < 0) throw std::runtime_error("truncated store");
    return static_cast<uint16_t>(a | (b << 8));
  };
  store.num_classes = get_u16();
  uint32_t count = read_u32(is);
  store.records.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    LatentRecord r;
    r.class_id = get_u16();
    uint16_t slen = get_u16();
    r.source.resize(slen);
    is.read(r.source.data(), slen);
    int c = get_u16(), h = get_u16(), w = get_u16();
    float bpp;
    is.read(reinterpret_cast<char*>(&bpp), 4);
    r.bpp = bpp;
    r.y_hat = Tensor({c, h, w});
    for (int64_t j = 0; j < r.y_hat.size(); ++j) {
      int16_t v;
      is.read(reinterpret_cast<char*>(&v), 2);
      r.y_hat[j] = v;
    }
    r.sigma_hat = Tensor({c, h, w});
    for (int64_t j = 0; j < r.sigma_hat.size(); ++j) {
      float v;
      is.read(reinterpret_cast<char*>(&v), 4);
      r.sigma_hat[j] = v;
    }
    if (!is) throw std::runtime_error("truncated store");
    store.records.push_back(std::move(r));
  }
  return store;
}

// Compresses every image of one split. Unreadable images are skipped with a
// warning; everything else is an error.
inline LatentStore precompute_latents(const DatasetIndex& index, Split split,
                                      const CodecModel& model,
                                      int* skipped_out = nullptr) {
  LatentStore store;
  store.quality_index = model.q.quality_index;
  store.num_classes = index.num_classes();
  GaussianPmfCache cache;
  int skipped = 0;
  for (const auto& e : index.entries) {
    if (e.split != split) continue;
    Tensor img;
    try {
      img = load_image(e.path);
    } catch (const std::exception& ex) {
      std::cerr << "warning: skipping " << e.path << ": " << ex.what() << "\n";
      ++skipped;
      continue;
    }
    const int orig_h = img.dim(1), orig_w = img.dim(2);
    img = reflect_pad_to_multiple(img, 64);
    CompressResult res = compress(img, model, &cache);
    LatentRecord r;
    r.y_hat = std::move(res.latents.y_hat);
    r.sigma_hat = std::move(res.latents.sigma_hat);
    r.class_id = e.class_id;
    r.source = e.path;
    r.bpp = 8.0 * static_cast<double>(res.stream.size()) / (orig_h * orig_w);
    store.records.push_back(std::move(r));
  }
  if (skipped_out) *skipped_out = skipped;
  if (skipped)
    std::cerr << "warning: skipped " << skipped << " unreadable image(s)\n";
  return store;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

// Resize both tensors to 32x32, then apply the SAME 28x28 crop and the SAME
// flip decision to both; they parameterize the same spatial cells and must
// stay aligned. Eval mode: center crop, no flip.
inline std::pair<Var, Var> augment(const Var& y, const Var& sigma, Rng& rng,
                                   bool train, bool nearest = false) {
  if (!y->value.same_shape(sigma->value))
    throw std::invalid_argument("augment: y/sigma shape mismatch");
  Var yr = resize2d(y, 32, 32, nearest);
  Var sr = resize2d(sigma, 32, 32, nearest);
  int top = 2, left = 2;
  bool flip = false;
  if (train) {
    top = static_cast<int>(rng.uniform_int(5));
    left = static_cast<int>(rng.uniform_int(5));
    flip = rng.bernoulli(0.5);
  }
  Var yc = crop2d(yr, top, left, 28, 28);
  Var sc = crop2d(sr, top, left, 28, 28);
  if (flip) {
    yc = hflip(yc);
    sc = hflip(sc);
  }
  return {yc, sc};
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

struct Batch {
  Tensor y;      // [B,C,28,28]
  Tensor sigma;  // [B,C,28,28]
  std::vector<int> labels;
  double mean_bpp = 0.0;
};

// Single-consumer iterator. Training epochs shuffle with an epoch-seeded rng
// and augment per record; the final short batch is included.
class BatchIterator {
 public:
  BatchIterator(const LatentStore& store, int batch_size, uint64_t seed,
                int epoch, bool train)
      : store_(store), batch_size_(batch_size), train_(train),
        rng_(Rng::mix(seed, static_cast<uint64_t>(epoch) + 0xBA7C4)) {
    if (store.records.empty())
      throw std::runtime_error("batches: empty latent store");
    if (batch_size < 1) throw std::invalid_argument("batches: batch_size < 1");
    order_.resize(store.records.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (train_) {
      for (size_t i = order_.size(); i > 1; --i)
        std::swap(order_[i - 1],
                  order_[static_cast<size_t>(
                      rng_.uniform_int(static_cast<int64_t>(i)))]);
    }
  }

  bool next(Batch& out) {
    if (pos_ >= order_.size()) return false;
    size_t n = std::min(static_cast<size_t>(batch_size_),
                        order_.size() - pos_);
    const auto& shape = store_.records[order_[pos_]].y_hat.shape();
    const int C = shape[0];
    out.y = Tensor({static_cast<int>(n), C, 28, 28});
    out.sigma = Tensor({static_cast<int>(n), C, 28, 28});
    out.labels.resize(n);
    double bpp_sum = 0;
    NoGradGuard ng;
    for (size_t b = 0; b < n; ++b) {
      const LatentRecord& r = store_.records[order_[pos_ + b]];
      Tensor y4({1, C, r.y_hat.dim(1), r.y_hat.dim(2)},
                std::vector<double>(r.y_hat.data(),
                                    r.y_hat.data() + r.y_hat.size()));
      Tensor s4({1, C, r.sigma_hat.dim(1), r.sigma_hat.dim(2)},
                std::vector<double>(r.sigma_hat.data(),
                                    r.sigma_hat.data() + r.sigma_hat.size()));
      auto [ya, sa] = augment(constant(std::move(y4)), constant(std::move(s4)),
                              rng_, train_);
      std::copy_n(ya->value.data(), ya->value.size(),
                  out.y.data() + out.y.idx4(static_cast<int>(b), 0, 0, 0));
      std::copy_n(sa->value.data(), sa->value.size(),
                  out.sigma.data() +
                      out.sigma.idx4(static_cast<int>(b), 0, 0, 0));
      out.labels[b] = r.class_id;
      bpp_sum += r.bpp;
    }
    out.mean_bpp = bpp_sum / static_cast<double>(n);
    pos_ += n;
    return true;
  }

 private:
  const LatentStore& store_;
  int batch_size_;
  bool train_;
  Rng rng_;
  std::vector<size_t> order_;
  size_t pos_ = 0;
};

}  // namespace lvc

#endif  // LATENTVISION_DATASET_HPP
