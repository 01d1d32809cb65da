#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "kvlatent/error.hpp"
#include "kvlatent/parallel.hpp"

namespace kvlatent {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major tensor. Rank 1 and 2 are what the model uses; rank-1
// tensors behave as a single row where a matrix is expected.
template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }
  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept {
    return shape_.size() >= 2 ? shape_[shape_.size() - 2] : (shape_.empty() ? 0 : 1);
  }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

// Throws NumericError naming `op` if any value is NaN or Inf.
template <class T>
void require_finite(const Tensor<T>& t, const char* op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(op, "non-finite value at flat index " + std::to_string(i) + " of " +
                                 shape_str(t.shape()));
    }
  }
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace kernels {

// C[m x n] (+)= A[m x k] * B[k x n]. Acc is the accumulator type for each
// output row; passing double with T = float gives a widened reduction.
template <class T, class Acc = T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  parallel_for(m, 16, [&](std::size_t r0, std::size_t r1) {
    std::vector<Acc> acc(n);
    for (std::size_t i = r0; i < r1; ++i) {
      if (accumulate) {
        for (std::size_t j = 0; j < n; ++j) acc[j] = static_cast<Acc>(c[i * n + j]);
      } else {
        std::fill(acc.begin(), acc.end(), Acc{0});
      }
      const T* arow = a.data() + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const Acc av = static_cast<Acc>(arow[p]);
        if (av == Acc{0}) continue;
        const T* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<Acc>(brow[j]);
      }
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] = static_cast<T>(acc[j]);
    }
  });
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  parallel_for(m, 16, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const T* arow = a.data() + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b.data() + j * k;
        T s{0};
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * n + j] = accumulate ? c[i * n + j] + s : s;
      }
    }
  });
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.end(), T{0});
  parallel_for(m, 16, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a.data() + p * m;
      const T* brow = b.data() + p * n;
      for (std::size_t i = r0; i < r1; ++i) {
        const T av = arow[i];
        if (av == T{0}) continue;
        T* crow = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// Row-wise softmax; entries of row i beyond column i + offset are treated as
// masked (probability exactly zero) when causal is set.
template <class T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t rows, std::size_t cols,
                  bool causal, std::size_t offset) {
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t live = causal ? std::min(cols, i + offset + 1) : cols;
    const T* xr = x.data() + i * cols;
    T* yr = y.data() + i * cols;
    T mx = xr[0];
    for (std::size_t j = 1; j < live; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < live; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += static_cast<double>(yr[j]);
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (std::size_t j = 0; j < live; ++j) yr[j] *= inv;
    for (std::size_t j = live; j < cols; ++j) yr[j] = T{0};
  }
}

inline constexpr double kRmsEps = 1e-6;

// y = x / rms(x) * w, row-wise; also returns the per-row inverse rms.
template <class T>
void rms_norm(std::span<const T> x, std::span<const T> w, std::span<T> y,
              std::span<T> inv_rms, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xr = x.data() + i * cols;
    double ss = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(cols) + kRmsEps));
    inv_rms[i] = inv;
    for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] = xr[j] * inv * w[j];
  }
}

template <class T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

}  // namespace kernels

template <class T>
Tensor<T> matmul_plain(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<T> c = Tensor<T>::matrix(a.rows(), b.cols());
  kernels::gemm_nn<T>(a.values(), b.values(), c.values(), a.rows(), a.cols(), b.cols(), false);
  return c;
}

}  // namespace kvlatent
