// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <map>
#include <new>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nmtforge {

using Real = double;
using Shape = std::vector<int64_t>;

// 64-byte aligned storage. Eigen's vectorized reductions peel differently
// depending on the start address, so fixed alignment is what makes results
// bit-reproducible across allocations.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using RealBuffer = std::vector<Real, AlignedAllocator<Real>>;

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Dense row-major array of reals. Graph operations view every tensor as a
// matrix: rank-2 tensors as (shape[0], shape[1]), rank-1 tensors as a single
// row and rank-0 tensors as 1x1.
class Tensor {
 public:
  Tensor() : shape_{0, 0} {}
  explicit Tensor(Shape shape, Real fill = 0.0);
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor zeros(int64_t rows, int64_t cols) { return Tensor({rows, cols}); }
  static Tensor scalar(Real value) { return Tensor({1, 1}, {value}); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<Real>> rows);
  static Tensor from_matrix(const RowMatrix& m);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int64_t rows() const;
  int64_t cols() const;

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  std::span<Real> row(int64_t r) { return {data_.data() + r * cols(), static_cast<size_t>(cols())}; }
  std::span<const Real> row(int64_t r) const {
    return {data_.data() + r * cols(), static_cast<size_t>(cols())};
  }

  Real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  Real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  Real& operator()(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
  Real operator()(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

  MatrixMap matrix() { return {data_.data(), rows(), cols()}; }
  ConstMatrixMap matrix() const { return {data_.data(), rows(), cols()}; }

  // Value of a single-element tensor.
  Real item() const;
  bool all_finite() const;
  void fill(Real value);
  // Same data, different shape; element count must match.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  RealBuffer data_;
};

int64_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Named parameter tensors; std::map keeps iteration order deterministic.
using ParameterStore = std::map<std::string, Tensor>;

int64_t parameter_count(const ParameterStore& params);

}  // namespace nmtforge
