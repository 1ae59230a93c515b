#pragma once

// Row-major n-d array with Eigen views. Deliberately small: shape bookkeeping
// plus typed storage; math lives in the ops that map it.

#include <Eigen/Dense>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <new>
#include <numeric>
#include <vector>

#include "horec/core.hpp"

namespace horec {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    require(d >= 0, "invalid-argument", "negative dimension in shape");
    n *= d;
  }
  return n;
}

// Storage is pinned to 64-byte alignment so Eigen's SIMD kernels take the
// same code path for every allocation; reductions then sum in an
// address-independent order and repeated forward passes are bit-identical.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    std::size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(p); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
class Tensor {
 public:
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap = Eigen::Map<
      const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(static_cast<std::size_t>(shape_numel(shape_)), T(0)) {}
  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)),
        data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    require(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_),
            "invalid-argument", "tensor data size does not match shape");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  T& at(std::int64_t i, std::int64_t j) {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  const T& at(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
    return data_[static_cast<std::size_t>(
        ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k,
              std::int64_t l) const {
    return data_[static_cast<std::size_t>(
        ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // 2-d view with explicit dimensions; the product must cover the buffer.
  MatrixMap mat(std::int64_t rows, std::int64_t cols) {
    require(rows * cols == numel(), "invalid-argument", "bad matrix view");
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap mat(std::int64_t rows, std::int64_t cols) const {
    require(rows * cols == numel(), "invalid-argument", "bad matrix view");
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  MatrixMap mat() {
    require(rank() == 2, "invalid-argument", "mat() needs a rank-2 tensor");
    return MatrixMap(data_.data(), shape_[0], shape_[1]);
  }
  ConstMatrixMap mat() const {
    require(rank() == 2, "invalid-argument", "mat() needs a rank-2 tensor");
    return ConstMatrixMap(data_.data(), shape_[0], shape_[1]);
  }
  VectorMap flat() { return VectorMap(data_.data(), numel()); }
  ConstVectorMap flat() const { return ConstVectorMap(data_.data(), numel()); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i)
      out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  Tensor reshaped(Shape s) const {
    require(shape_numel(s) == numel(), "invalid-argument",
            "reshape changes element count");
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

template <class T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

template <class T, class U>
bool same_shape_dims(const Tensor<T>& a, const Tensor<U>& b) {
  return a.shape() == b.shape();
}

}  // namespace horec
