#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iternet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

/// 64-byte aligned storage. Vectorised kernels peel a different prefix for
/// each start alignment, so unaligned buffers make the last bits of a sum
/// depend on where malloc happened to place them.
template <typename T>
struct aligned_allocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  aligned_allocator() = default;
  template <typename U>
  aligned_allocator(const aligned_allocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), alignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const aligned_allocator<U>&) const noexcept { return true; }
};

template <typename T>
using aligned_vector = std::vector<T, aligned_allocator<T>>;

/// Dense row-major tensor. Activations use (batch, channel, height, width);
/// convolution kernels use (out, in, kh, kw).
template <typename T>
class basic_tensor {
 public:
  using value_type = T;

  basic_tensor() = default;

  explicit basic_tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  basic_tensor(Shape shape, std::initializer_list<T> data)
      : basic_tensor(std::move(shape), aligned_vector<T>(data)) {}

  basic_tensor(Shape shape, const std::vector<T>& data)
      : basic_tensor(std::move(shape), aligned_vector<T>(data.begin(), data.end())) {}

  basic_tensor(Shape shape, aligned_vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " +
                                  shape_string(shape_));
    }
  }

  static basic_tensor scalar(T v) { return basic_tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  aligned_vector<T>& values() noexcept { return data_; }
  const aligned_vector<T>& values() const noexcept { return data_; }
  std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-d accessors; callers guarantee rank 4.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h,
              std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  basic_tensor reshaped(Shape shape) const {
    return basic_tensor(std::move(shape), data_);
  }

  template <typename U>
  basic_tensor<U> cast() const {
    aligned_vector<U> out(data_.begin(), data_.end());
    return basic_tensor<U>(shape_, std::move(out));
  }

  basic_tensor& operator+=(const basic_tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  void require_same_shape(const basic_tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw std::invalid_argument(std::string("tensor ") + what +
                                  ": shape mismatch " + shape_string(shape_) +
                                  " vs " + shape_string(other.shape_));
    }
  }

  friend bool operator==(const basic_tensor& a, const basic_tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  aligned_vector<T> data_;
};

using Tensor = basic_tensor<float>;

/// Copies channel/spatial window [row,row+h)x[col,col+w) of every batch item.
template <typename T>
basic_tensor<T> crop(const basic_tensor<T>& src, std::size_t row,
                     std::size_t col, std::size_t h, std::size_t w) {
  const auto& s = src.shape();
  if (s.size() != 4 || row + h > s[2] || col + w > s[3]) {
    throw std::invalid_argument("crop: window out of range for " +
                                shape_string(s));
  }
  basic_tensor<T> out(Shape{s[0], s[1], h, w});
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t y = 0; y < h; ++y) {
        const T* in = &src.at(n, c, row + y, col);
        std::copy(in, in + w, &out.at(n, c, y, 0));
      }
  return out;
}

/// Stacks rank-4 tensors with batch 1 along the batch axis.
template <typename T>
basic_tensor<T> stack_batch(const std::vector<basic_tensor<T>>& items) {
  if (items.empty()) throw std::invalid_argument("stack_batch: no items");
  Shape s = items.front().shape();
  const std::size_t per = items.front().size();
  s[0] = 0;
  for (const auto& it : items) s[0] += it.dim(0);
  aligned_vector<T> data;
  data.reserve(per * items.size());
  for (const auto& it : items) {
    if (it.size() / it.dim(0) != per / items.front().dim(0) ||
        it.shape()[1] != s[1] || it.shape()[2] != s[2] ||
        it.shape()[3] != s[3]) {
      throw std::invalid_argument("stack_batch: shape mismatch " +
                                  shape_string(it.shape()));
    }
    data.insert(data.end(), it.values().begin(), it.values().end());
  }
  return basic_tensor<T>(std::move(s), std::move(data));
}

}  // namespace iternet
