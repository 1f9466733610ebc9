#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "casdiff/errors.hpp"

namespace casdiff {

/// Allocator with a fixed 64-byte alignment. Vectorized Eigen kernels pick
/// their summation order from the data address, so a fixed alignment keeps
/// results identical across processes.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

/// Dense row-major tensor. Images are (C,H,W); batches are (N,C,H,W).
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, AlignedAllocator<T>>;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  Tensor(std::vector<int> shape, const std::vector<T>& data)
      : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

  Tensor(std::vector<int> shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw InvalidArgument("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                            shape_string(shape_));
    }
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw InvalidArgument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// Reinterpret with a new shape of the same element count.
  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != data_.size()) throw InvalidArgument("reshape to " + shape_string(shape) + " changes size");
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    typename Tensor<U>::Storage out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<int> shape_;
  Storage data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(what) + ": shape mismatch " + Tensor<T>::shape_string(a.shape()) + " vs " +
                          Tensor<T>::shape_string(b.shape()));
  }
}

/// Stack equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw InvalidArgument("stack of zero tensors");
  std::vector<int> shape = items.front().shape();
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  typename Tensor<T>::Storage data;
  data.reserve(Tensor<T>::count(shape));
  for (const auto& item : items) {
    require_same_shape(item, items.front(), "stack");
    data.insert(data.end(), item.values().begin(), item.values().end());
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

/// The i-th slice along the leading axis.
template <typename T>
Tensor<T> slice0(const Tensor<T>& batch, int i) {
  std::vector<int> shape(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = Tensor<T>::count(shape);
  const auto first = batch.values().begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(i));
  return Tensor<T>(std::move(shape), typename Tensor<T>::Storage(first, first + static_cast<std::ptrdiff_t>(n)));
}

}  // namespace casdiff
