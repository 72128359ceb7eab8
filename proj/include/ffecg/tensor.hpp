#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ffecg/errors.hpp"

namespace ffecg {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

/// Dense row-major array. Rank-4 tensors follow (batch, channels, height, width).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(checked(std::move(shape))), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor", "data size " + std::to_string(data_.size()) + " does not match shape " +
                                     shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-4 accessors.
  int n() const { return dim(0); }
  int c() const { return dim(1); }
  int h() const { return dim(2); }
  int w() const { return dim(3); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  std::size_t index(int n, int c, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size()) throw ShapeError("tensor", "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  // Slice [begin, end) along the batch axis.
  Tensor batch_slice(int begin, int end) const {
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t per = size() / static_cast<std::size_t>(shape_[0]);
    return Tensor(s, std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(per * begin),
                                    data_.begin() + static_cast<std::ptrdiff_t>(per * end)));
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }
  T mean() const { return data_.empty() ? T(0) : sum() / static_cast<T>(data_.size()); }
  T min() const { return *std::min_element(data_.begin(), data_.end()); }
  T max() const { return *std::max_element(data_.begin(), data_.end()); }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  void check_same(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_)
      throw ShapeError("tensor", std::string(what) + ": shape " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  static Shape checked(Shape s) {
    for (int d : s)
      if (d < 0) throw ShapeError("tensor", "negative extent in " + shape_str(s));
    return s;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Concatenate rank-4 tensors along the batch axis.
template <class T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("tensor", "concat of zero tensors");
  Shape s = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape q = p.shape();
    q[0] = s[0];
    if (q != s) throw ShapeError("tensor", "concat shape mismatch " + shape_str(p.shape()));
    total += p.shape()[0];
  }
  s[0] = total;
  std::vector<T> data;
  data.reserve(shape_numel(s));
  for (const auto& p : parts) data.insert(data.end(), p.vec().begin(), p.vec().end());
  return Tensor<T>(s, std::move(data));
}

/// Bilinear resize of a rank-4 tensor (align_corners = false convention).
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() != 4) throw ShapeError("tensor", "resize expects rank 4, got " + shape_str(x.shape()));
  if (x.h() == out_h && x.w() == out_w) return x;
  Tensor<T> y(Shape{x.n(), x.c(), out_h, out_w});
  const double sy = static_cast<double>(x.h()) / out_h;
  const double sx = static_cast<double>(x.w()) / out_w;
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int oy = 0; oy < out_h; ++oy) {
        const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(x.h() - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, x.h() - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
          const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(x.w() - 1));
          const int x0 = static_cast<int>(fx);
          const int x1 = std::min(x0 + 1, x.w() - 1);
          const double wx = fx - x0;
          const double top = x.at(n, c, y0, x0) * (1 - wx) + x.at(n, c, y0, x1) * wx;
          const double bot = x.at(n, c, y1, x0) * (1 - wx) + x.at(n, c, y1, x1) * wx;
          y.at(n, c, oy, ox) = static_cast<T>(top * (1 - wy) + bot * wy);
        }
      }
  return y;
}

}  // namespace ffecg
