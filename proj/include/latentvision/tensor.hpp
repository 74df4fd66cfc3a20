#ifndef LATENTVISION_TENSOR_HPP
#define LATENTVISION_TENSOR_HPP

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lvc {

// Dense row-major tensor of doubles. Rank is dynamic; NCHW order is used
// throughout for feature maps.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(count(shape_), 0.0);
  }

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != static_cast<size_t>(count(shape_)))
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW element access.
  double& at4(int n, int c, int h, int w) {
    return data_[idx4(n, c, h, w)];
  }
  double at4(int n, int c, int h, int w) const {
    return data_[idx4(n, c, h, w)];
  }

  size_t idx4(int n, int c, int h, int w) const {
    assert(rank() == 4);
    return ((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) *
               shape_[3] +
           w;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  void add_inplace(const Tensor& o) {
    assert(same_shape(o));
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  double min() const {
    return *std::min_element(data_.begin(), data_.end());
  }
  double max() const {
    return *std::max_element(data_.begin(), data_.end());
  }
  double sum() const {
    return std::accumulate(data_.begin(), data_.end(), 0.0);
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline void check_shape(const Tensor& t, const std::vector<int>& want,
                        const char* what) {
  if (t.shape() != want)
    throw std::invalid_argument(std::string(what) + ": shape " +
                                t.shape_str() + " unexpected");
}

}  // namespace lvc

#endif  // LATENTVISION_TENSOR_HPP
