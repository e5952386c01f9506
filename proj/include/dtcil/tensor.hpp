// SPDX-License-Identifier: Apache-2.0
//
// Dense NCHW tensor used by every network and loss in the library.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtcil {

/// Thrown on any violated precondition (shape, range, configuration).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(what);
}

using Shape = std::vector<int>;

/// Allocates on 64-byte boundaries. Vectorized reductions split a buffer into a scalar
/// head and SIMD body according to its address, so a fixed alignment keeps results
/// bit-identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

std::string shape_str(const Shape& s);

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, AlignedAllocator<T>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  BasicTensor(Shape shape, const std::vector<T>& data)
      : BasicTensor(std::move(shape), Storage(data.begin(), data.end()), 0) {}

  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // NCHW accessors; valid for rank-4 tensors.
  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }
  // Row-major 2-D accessor.
  T& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  const T& at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  BasicTensor reshaped(Shape s) const {
    require(count(s) == data_.size(), "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return BasicTensor(std::move(s), data_, 0);
  }

  /// Number of elements per leading-axis slice.
  std::size_t stride0() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

  /// Copy of samples [begin, end) along axis 0.
  BasicTensor slice0(int begin, int end) const {
    require(0 <= begin && begin <= end && end <= shape_.at(0), "slice0 out of range");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t st = stride0();
    return BasicTensor(std::move(s), Storage(data_.begin() + begin * st, data_.begin() + end * st), 0);
  }

  /// Copies rows of `src` (same trailing shape) into this tensor starting at sample `at0`.
  void assign0(int at0, const BasicTensor& src) {
    require(src.size() % std::max<std::size_t>(stride0(), 1) == 0 || src.empty(), "assign0 trailing shape mismatch");
    require(static_cast<std::size_t>(at0) * stride0() + src.size() <= data_.size(), "assign0 out of range");
    std::copy(src.data_.begin(), src.data_.end(), data_.begin() + at0 * stride0());
  }

  template <typename U>
  BasicTensor<U> cast() const {
    typename BasicTensor<U>::Storage out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out), 0);
  }

  BasicTensor& operator+=(const BasicTensor& o) {
    require(o.shape_ == shape_, "tensor += shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  BasicTensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool operator==(const BasicTensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  template <typename U>
  friend class BasicTensor;
  BasicTensor(Shape shape, Storage data, int) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == count(shape_), "tensor data does not match shape " + shape_str(shape_));
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Concatenate along axis 0; all inputs share trailing dimensions. Empty tensors are skipped.
template <typename T>
BasicTensor<T> concat0(const std::vector<const BasicTensor<T>*>& parts) {
  Shape s;
  int n = 0;
  for (const auto* p : parts) {
    if (p->empty()) continue;
    if (s.empty()) s = p->shape();
    require(p->rank() == static_cast<int>(s.size()) && std::equal(s.begin() + 1, s.end(), p->shape().begin() + 1),
            "concat0 trailing shape mismatch");
    n += p->dim(0);
  }
  if (s.empty()) return {};
  s[0] = n;
  BasicTensor<T> out(s);
  int at = 0;
  for (const auto* p : parts) {
    if (p->empty()) continue;
    out.assign0(at, *p);
    at += p->dim(0);
  }
  return out;
}

/// FNV-1a over the raw bytes; used for bit-identity checks on frozen models.
std::uint64_t checksum_bytes(const void* data, std::size_t bytes, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace dtcil
