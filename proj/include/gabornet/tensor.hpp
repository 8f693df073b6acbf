#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gabornet/errors.hpp"

namespace gabornet {

using Dims4 = std::array<std::size_t, 4>;

inline std::string dims_string(const Dims4& d) {
  return "(" + std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]) +
         "x" + std::to_string(d[3]) + ")";
}

/// Dense N x C x H x W array, row-major in that order.
template <class T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{0})
      : dims_{n, c, h, w}, data_(n * c * h * w, fill) {}
  explicit Tensor4(const Dims4& dims, T fill = T{0}) : Tensor4(dims[0], dims[1], dims[2], dims[3], fill) {}

  const Dims4& dims() const { return dims_; }
  std::size_t n() const { return dims_[0]; }
  std::size_t c() const { return dims_[1]; }
  std::size_t h() const { return dims_[2]; }
  std::size_t w() const { return dims_[3]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Elements per sample (C*H*W).
  std::size_t sample_size() const { return dims_[1] * dims_[2] * dims_[3]; }
  std::size_t plane_size() const { return dims_[2] * dims_[3]; }

  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T* sample(std::size_t n) { return data_.data() + n * sample_size(); }
  const T* sample(std::size_t n) const { return data_.data() + n * sample_size(); }
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * dims_[1] + c) * plane_size(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * dims_[1] + c) * plane_size();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Reinterprets the dimensions; element count must be unchanged.
  void reshape(const Dims4& dims) {
    if (dims[0] * dims[1] * dims[2] * dims[3] != data_.size()) {
      throw DimensionError("reshape " + dims_string(dims_) + " -> " + dims_string(dims));
    }
    dims_ = dims;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor4<U> cast() const {
    Tensor4<U> out(dims_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor4& a, const Tensor4& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Dims4 dims_{0, 0, 0, 0};
  std::vector<T> data_;
};

template <class T>
void require_same_dims(const Tensor4<T>& a, const Tensor4<T>& b, const char* what) {
  if (a.dims() != b.dims()) {
    throw DimensionError(std::string(what) + ": " + dims_string(a.dims()) + " vs " +
                         dims_string(b.dims()));
  }
}

}  // namespace gabornet
