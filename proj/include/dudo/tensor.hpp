#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dudo {

/// Allocator returning 64-byte aligned blocks. Vectorized kernels split work into aligned
/// packets and a scalar remainder by address; fixing the alignment makes that split, and so
/// every rounding, depend on shapes alone.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense real tensor, row-major. Rank-4 tensors are laid out (batch, channel, height, width).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  AlignedVector<T>& storage() noexcept { return data_; }
  const AlignedVector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  /// Same storage, new shape; element count must agree.
  Tensor reshaped(Shape shape) const& {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

/// Dense complex tensor of rank 2 to 4. The trailing two dimensions are spatial (height, width).
template <class T>
class ComplexTensor {
 public:
  using value_type = std::complex<T>;

  ComplexTensor() = default;
  explicit ComplexTensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_)) { check_rank(); }
  ComplexTensor(Shape shape, const std::vector<std::complex<T>>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_rank();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("complex tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t height() const { return shape_[shape_.size() - 2]; }
  std::size_t width() const { return shape_.back(); }
  /// Number of independent 2-D planes (product of the leading dimensions).
  std::size_t planes() const { return data_.size() / (height() * width()); }

  std::span<std::complex<T>> data() noexcept { return data_; }
  std::span<const std::complex<T>> data() const noexcept { return data_; }
  std::complex<T>& operator[](std::size_t i) noexcept { return data_[i]; }
  const std::complex<T>& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<std::complex<T>> plane(std::size_t p) { return {data_.data() + p * height() * width(), height() * width()}; }
  std::span<const std::complex<T>> plane(std::size_t p) const {
    return {data_.data() + p * height() * width(), height() * width()};
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](const std::complex<T>& v) { return std::isfinite(v.real()) && std::isfinite(v.imag()); });
  }

  template <class U>
  ComplexTensor<U> cast() const {
    std::vector<std::complex<U>> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](const std::complex<T>& v) {
      return std::complex<U>(static_cast<U>(v.real()), static_cast<U>(v.imag()));
    });
    return ComplexTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const ComplexTensor& a, const ComplexTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_rank() const {
    if (shape_.size() < 2 || shape_.size() > 4) {
      throw ShapeError("complex tensor rank must be 2..4, got shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<std::complex<T>> data_;
};

/// Packs complex planes into a real (batch, 2, h, w) tensor: channel 0 real, channel 1 imaginary.
template <class T>
Tensor<T> to_channels(const ComplexTensor<T>& z) {
  const std::size_t b = z.planes(), h = z.height(), w = z.width(), hw = h * w;
  Tensor<T> out({b, 2, h, w});
  for (std::size_t p = 0; p < b; ++p) {
    auto src = z.plane(p);
    T* re = out.data().data() + p * 2 * hw;
    T* im = re + hw;
    for (std::size_t i = 0; i < hw; ++i) {
      re[i] = src[i].real();
      im[i] = src[i].imag();
    }
  }
  return out;
}

/// Inverse of to_channels; returns shape (batch, h, w).
template <class T>
ComplexTensor<T> from_channels(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != 2) {
    throw ShapeError("expected (batch, 2, h, w) tensor, got " + shape_string(x.shape()));
  }
  const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
  ComplexTensor<T> out({b, h, w});
  for (std::size_t p = 0; p < b; ++p) {
    const T* re = x.data().data() + p * 2 * hw;
    const T* im = re + hw;
    auto dst = out.plane(p);
    for (std::size_t i = 0; i < hw; ++i) dst[i] = {re[i], im[i]};
  }
  return out;
}

template <class T>
Tensor<T> magnitude(const ComplexTensor<T>& z) {
  Shape s = z.shape();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::abs(z[i]);
  return out;
}

}  // namespace dudo
