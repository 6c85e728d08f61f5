#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fesnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when tensor extents disagree with what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Dense row-major N-d array. Four-dimensional tensors are laid out as
/// (batch, channels, height, width).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 4-D views.
  std::size_t batch() const { return shape_.at(0); }
  std::size_t channels() const { return shape_.at(1); }
  std::size_t height() const { return shape_.at(2); }
  std::size_t width() const { return shape_.at(3); }
  std::size_t plane() const { return shape_.at(2) * shape_.at(3); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h,
              std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Pointer to the (n, c) plane of a 4-D tensor.
  T* plane_ptr(std::size_t n, std::size_t c) noexcept {
    return data_.data() + (n * shape_[1] + c) * shape_[2] * shape_[3];
  }
  const T* plane_ptr(std::size_t n, std::size_t c) const noexcept {
    return data_.data() + (n * shape_[1] + c) * shape_[2] * shape_[3];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& other) const noexcept {
    return shape_ == other.shape_;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) {
        throw ShapeError("tensor extent " + std::to_string(i) +
                         " is zero in shape " + shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Throws ShapeError unless `t` is 4-D. `what` names the operand.
template <typename T>
void require_4d(const Tensor<T>& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + " must be 4-D (N,C,H,W), got " +
                     shape_string(t.shape()));
  }
}

}  // namespace fesnet
