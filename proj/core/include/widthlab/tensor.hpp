#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

namespace widthlab {

// Dense row-major tensor, rank 1..3. Deliberately minimal: the model code
// owns all the structure, this is just contiguous storage with shape.
template <typename T>
struct Tensor {
  std::vector<int64_t> dims;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> d) : dims(std::move(d)) {
    data.assign(static_cast<size_t>(count(dims)), T(0));
  }

  static int64_t count(const std::vector<int64_t>& d) {
    int64_t n = 1;
    for (int64_t x : d) n *= x;
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(dims.size()); }
  int64_t dim(int i) const { return dims[static_cast<size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& at(int64_t i) const { return data[static_cast<size_t>(i)]; }

  T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * dims[1] + c)]; }
  const T& at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * dims[1] + c)]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(dims);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 2-D view of a tensor's storage. rows*cols must equal the element count.
template <typename T>
Eigen::Map<RowMat<T>> mat_view(Tensor<T>& t, int64_t rows, int64_t cols) {
  assert(rows * cols == t.size());
  return Eigen::Map<RowMat<T>>(t.ptr(), rows, cols);
}

template <typename T>
Eigen::Map<const RowMat<T>> mat_view(const Tensor<T>& t, int64_t rows, int64_t cols) {
  assert(rows * cols == t.size());
  return Eigen::Map<const RowMat<T>>(t.ptr(), rows, cols);
}

template <typename T>
Eigen::Map<RowMat<T>> mat_view(Tensor<T>& t) {
  assert(t.rank() == 2);
  return mat_view(t, t.dim(0), t.dim(1));
}

template <typename T>
Eigen::Map<const RowMat<T>> mat_view(const Tensor<T>& t) {
  assert(t.rank() == 2);
  return mat_view(t, t.dim(0), t.dim(1));
}

// Sum of squares accumulated in double regardless of storage type.
template <typename T>
double sum_sq(const Tensor<T>& t) {
  double acc = 0.0;
  for (const T& v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const T& v : t.data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace widthlab
