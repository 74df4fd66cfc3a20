#ifndef LATENTVISION_ENTROPY_HPP
#define LATENTVISION_ENTROPY_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "latentvision/autodiff.hpp"  // normal_cdf_value

namespace lvc {

struct EncodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Quantized pmf tables
// ---------------------------------------------------------------------------

// Integer-symbol pmf with 16-bit quantized frequencies summing to exactly
// 2^16. Every in-support symbol has frequency >= 1 so it stays decodable.
struct PmfTable {
  int support_min = 0;
  int support_max = 0;
  std::vector<uint32_t> freq;  // quantized, sum == kTotal
  std::vector<uint32_t> cum;   // prefix sums, size freq.size()+1

  static constexpr uint32_t kTotal = 1u << 16;

  int size() const { return static_cast<int>(freq.size()); }

  bool contains(int s) const { return s >= support_min && s <= support_max; }

  void build_cum() {
    cum.assign(freq.size() + 1, 0);
    for (size_t i = 0; i < freq.size(); ++i) cum[i + 1] = cum[i] + freq[i];
  }

  // Index of the symbol whose cumulative interval contains v.
  int find(uint32_t v) const {
    auto it = std::upper_bound(cum.begin(), cum.end(), v);
    return static_cast<int>(it - cum.begin()) - 1;
  }
};

// Quantizes nonnegative weights to frequencies >= 1 summing to kTotal.
// Deterministic: remainders are distributed in a fixed order.
inline PmfTable quantize_pmf(int support_min, const std::vector<double>& p) {
  const int n = static_cast<int>(p.size());
  if (n <= 0 || n > (1 << 16))
    throw std::invalid_argument("quantize_pmf: unsupported support size");
  double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(total > 0)) throw std::invalid_argument("quantize_pmf: zero mass");
  PmfTable t;
  t.support_min = support_min;
  t.support_max = support_min + n - 1;
  t.freq.resize(p.size());
  std::vector<std::pair<double, int>> rem(p.size());
  uint64_t sum = 0;
  for (int i = 0; i < n; ++i) {
    double ideal = p[i] / total * PmfTable::kTotal;
    uint32_t f = static_cast<uint32_t>(std::max(1.0, std::floor(ideal)));
    t.freq[i] = f;
    sum += f;
    rem[i] = {ideal - std::floor(ideal), i};
  }
  if (sum < PmfTable::kTotal) {
    // Hand out the deficit by largest fractional remainder.
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
      return a.first > b.first;
    });
    uint64_t deficit = PmfTable::kTotal - sum;
    for (uint64_t i = 0; i < deficit; ++i) t.freq[rem[i % n].second] += 1;
  } else if (sum > PmfTable::kTotal) {
    // Take the excess from the largest frequencies, never below 1.
    uint64_t excess = sum - PmfTable::kTotal;
    while (excess > 0) {
      int best = -1;
      for (int i = 0; i < n; ++i)
        if (t.freq[i] > 1 && (best < 0 || t.freq[i] > t.freq[best])) best = i;
      if (best < 0) throw std::runtime_error("quantize_pmf: cannot normalize");
      uint32_t take = static_cast<uint32_t>(
          std::min<uint64_t>(excess, t.freq[best] - 1));
      // Shave at most half so mass stays spread out.
      take = std::max(1u, std::min(take, (t.freq[best] - 1 + 1) / 2));
      t.freq[best] -= take;
      excess -= take;
    }
  }
  t.build_cum();
  return t;
}

constexpr double kSigmaMin = 0.11;
constexpr double kSigmaMax = 2000.0;
constexpr double kProbFloor = 0x1.0p-16;

// Zero-mean Gaussian pmf over [-smax, smax], smax = ceil(12*scale).
inline PmfTable gaussian_pmf(double scale) {
  if (!(scale >= kSigmaMin))
    throw std::invalid_argument("gaussian_pmf: scale below sigma_min");
  if (!(scale <= kSigmaMax))
    throw std::invalid_argument("gaussian_pmf: scale too large");
  const int smax = static_cast<int>(std::ceil(12.0 * scale));
  std::vector<double> p(static_cast<size_t>(2 * smax + 1));
  for (int k = -smax; k <= smax; ++k) {
    double hi = normal_cdf_value((k + 0.5) / scale);
    double lo = normal_cdf_value((k - 0.5) / scale);
    p[static_cast<size_t>(k + smax)] = std::max(hi - lo, 0.0);
  }
  return quantize_pmf(-smax, p);
}

// Pmf tables keyed by the exact bit pattern of the scale. hyper_synthesis is
// bias-dominated, so scales repeat heavily across elements.
class GaussianPmfCache {
 public:
  const PmfTable& get(double scale) {
    uint64_t key;
    static_assert(sizeof(key) == sizeof(scale));
    std::memcpy(&key, &scale, sizeof(key));
    auto it = cache_.find(key);
    if (it != cache_.end()) return *it->second;
    auto t = std::make_unique<PmfTable>(gaussian_pmf(scale));
    return *cache_.emplace(key, std::move(t)).first->second;
  }

 private:
  std::unordered_map<uint64_t, std::unique_ptr<PmfTable>> cache_;
};

// ---------------------------------------------------------------------------
// Range coder (32-bit state, 16-bit probabilities, carry-less renorm)
// ---------------------------------------------------------------------------

namespace detail {
constexpr uint32_t kRcTop = 1u << 24;
constexpr uint32_t kRcBot = 1u << 16;

inline uint32_t fnv32(const std::vector<int32_t>& symbols) {
  uint32_t h = 2166136261u;
  for (int32_t s : symbols) {
    uint32_t u = static_cast<uint32_t>(s);
    for (int i = 0; i < 4; ++i) {
      h ^= (u >> (8 * i)) & 0xFF;
      h *= 16777619u;
    }
  }
  return h;
}
}  // namespace detail

class RangeEncoder {
 public:
  void encode(uint32_t cum, uint32_t f) {
    uint32_t r = range_ >> 16;
    low_ += r * cum;
    range_ = r * f;
    normalize();
  }

  std::vector<uint8_t> finish() {
    for (int i = 0; i < 4; ++i) {
      out_.push_back(static_cast<uint8_t>(low_ >> 24));
      low_ <<= 8;
    }
    return std::move(out_);
  }

 private:
  void normalize() {
    while ((low_ ^ (low_ + range_)) < detail::kRcTop ||
           (range_ < detail::kRcBot &&
            ((range_ = (0u - low_) & (detail::kRcBot - 1)), true))) {
      out_.push_back(static_cast<uint8_t>(low_ >> 24));
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  uint32_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t len) : data_(data), len_(len) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }

  uint32_t decode_value() {
    uint32_t r = range_ >> 16;
    uint32_t v = (code_ - low_) / r;
    if (v >= PmfTable::kTotal) throw DecodeError("corrupt stream: range violation");
    return v;
  }

  void consume(uint32_t cum, uint32_t f) {
    uint32_t r = range_ >> 16;
    low_ += r * cum;
    range_ = r * f;
    normalize();
  }

  size_t consumed() const { return pos_; }

 private:
  uint8_t next_byte() {
    if (pos_ >= len_) throw DecodeError("truncated stream");
    return data_[pos_++];
  }

  void normalize() {
    while ((low_ ^ (low_ + range_)) < detail::kRcTop ||
           (range_ < detail::kRcBot &&
            ((range_ = (0u - low_) & (detail::kRcBot - 1)), true))) {
      code_ = (code_ << 8) | next_byte();
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  const uint8_t* data_;
  size_t len_;
  size_t pos_ = 0;
  uint32_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

// Encodes symbols[i] under pmfs[i]. The emitted segment carries a trailing
// 32-bit checksum of the symbol sequence so corruption cannot decode
// silently. A symbol outside its pmf support is an error, never clamped.
inline std::vector<uint8_t> range_encode(
    const std::vector<int32_t>& symbols,
    const std::vector<const PmfTable*>& pmfs) {
  if (symbols.size() != pmfs.size())
    throw std::invalid_argument("range_encode: pmf count mismatch");
  RangeEncoder enc;
  for (size_t i = 0; i < symbols.size(); ++i) {
    const PmfTable& t = *pmfs[i];
    if (!t.contains(symbols[i]))
      throw EncodeError("symbol outside pmf support");
    int idx = symbols[i] - t.support_min;
    enc.encode(t.cum[idx], t.freq[idx]);
  }
  std::vector<uint8_t> out = enc.finish();
  uint32_t h = detail::fnv32(symbols);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(h >> (8 * i)));
  return out;
}

inline std::vector<int32_t> range_decode(
    const std::vector<uint8_t>& bytes,
    const std::vector<const PmfTable*>& pmfs, size_t count) {
  if (pmfs.size() != count)
    throw std::invalid_argument("range_decode: pmf count mismatch");
  if (bytes.size() < 8) throw DecodeError("truncated stream");
  std::vector<int32_t> symbols(count);
  RangeDecoder dec(bytes.data(), bytes.size() - 4);
  for (size_t i = 0; i < count; ++i) {
    const PmfTable& t = *pmfs[i];
    uint32_t v = dec.decode_value();
    int idx = t.find(v);
    symbols[i] = t.support_min + idx;
    dec.consume(t.cum[idx], t.freq[idx]);
  }
  uint32_t want = 0;
  for (int i = 0; i < 4; ++i)
    want |= static_cast<uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  if (detail::fnv32(symbols) != want)
    throw DecodeError("corrupt stream: checksum mismatch");
  return symbols;
}

// ---------------------------------------------------------------------------
// Bitstream container
// ---------------------------------------------------------------------------

// On-disk/.lvc layout (all integers little-endian):
//   magic "LVC1" | version u8 | quality u8 | image_h u16 | image_w u16 |
//   z_len u32 | z_bytes | y_len u32 | y_bytes
struct Bitstream {
  static constexpr char kMagic[4] = {'L', 'V', 'C', '1'};
  static constexpr uint8_t kVersion = 1;

  uint8_t version = kVersion;
  uint8_t quality_index = 0;
  uint16_t image_h = 0;
  uint16_t image_w = 0;
  std::vector<uint8_t> z_bytes;
  std::vector<uint8_t> y_bytes;
};

inline void put_u16(std::vector<uint8_t>& v, uint16_t x) {
  v.push_back(static_cast<uint8_t>(x));
  v.push_back(static_cast<uint8_t>(x >> 8));
}

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}

inline std::vector<uint8_t> serialize(const Bitstream& s) {
  std::vector<uint8_t> out;
  out.insert(out.end(), Bitstream::kMagic, Bitstream::kMagic + 4);
  out.push_back(s.version);
  out.push_back(s.quality_index);
  put_u16(out, s.image_h);
  put_u16(out, s.image_w);
  put_u32(out, static_cast<uint32_t>(s.z_bytes.size()));
  out.insert(out.end(), s.z_bytes.begin(), s.z_bytes.end());
  put_u32(out, static_cast<uint32_t>(s.y_bytes.size()));
  out.insert(out.end(), s.y_bytes.begin(), s.y_bytes.end());
  return out;
}

inline Bitstream parse(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > bytes.size()) throw DecodeError("truncated stream");
  };
  need(4);
  if (std::memcmp(bytes.data(), Bitstream::kMagic, 4) != 0)
    throw DecodeError("not a latentvision stream");
  pos = 4;
  need(2);
  Bitstream s;
  s.version = bytes[pos++];
  if (s.version != Bitstream::kVersion)
    throw DecodeError("unsupported version");
  s.quality_index = bytes[pos++];
  auto get_u16 = [&]() {
    need(2);
    uint16_t v = static_cast<uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  };
  auto get_u32 = [&]() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  s.image_h = get_u16();
  s.image_w = get_u16();
  uint32_t zl = get_u32();
  need(zl);
  s.z_bytes.assign(bytes.begin() + pos, bytes.begin() + pos + zl);
  pos += zl;
  uint32_t yl = get_u32();
  need(yl);
  s.y_bytes.assign(bytes.begin() + pos, bytes.begin() + pos + yl);
  pos += yl;
  if (pos != bytes.size()) throw DecodeError("truncated stream");
  return s;
}

}  // namespace lvc

#endif  // LATENTVISION_ENTROPY_HPP
