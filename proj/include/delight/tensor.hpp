#pragma once

/**
 * @file tensor.hpp
 * @brief Dense row-major tensor used throughout the library.
 */

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace delight {

/// Dense row-major tensor of arbitrary rank. Shapes are immutable after
/// construction except through reshape(), which must preserve numel.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), T(0));
  }

  Tensor(std::vector<int64_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != static_cast<int64_t>(data_.size()))
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW accessor
  T& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  // HWC accessor (images)
  T& at3(int64_t h, int64_t w, int64_t c) {
    return data_[static_cast<size_t>((h * shape_[1] + w) * shape_[2] + c)];
  }
  const T& at3(int64_t h, int64_t w, int64_t c) const {
    return data_[static_cast<size_t>((h * shape_[1] + w) * shape_[2] + c)];
  }
  // HW accessor (gray maps)
  T& at2(int64_t h, int64_t w) { return data_[static_cast<size_t>(h * shape_[1] + w)]; }
  const T& at2(int64_t h, int64_t w) const { return data_[static_cast<size_t>(h * shape_[1] + w)]; }

  void reshape(std::vector<int64_t> shape) {
    if (count(shape) != numel()) throw std::invalid_argument("Tensor::reshape: numel mismatch");
    shape_ = std::move(shape);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T min_value() const {
    T m = data_.empty() ? T(0) : data_[0];
    for (const T& v : data_) m = std::min(m, v);
    return m;
  }
  T max_value() const {
    T m = data_.empty() ? T(0) : data_[0];
    for (const T& v : data_) m = std::max(m, v);
    return m;
  }
  double mean_value() const {
    if (data_.empty()) return 0.0;
    double s = 0.0;
    for (const T& v : data_) s += static_cast<double>(v);
    return s / static_cast<double>(data_.size());
  }

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

}  // namespace delight
