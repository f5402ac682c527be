#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hp/errors.hpp"

namespace hp {

/// Dense row-major matrix. Rows hold feature vectors (patch features,
/// segmentation features, projections). The data-taking constructor rejects
/// non-finite entries; zeros() is the usual way to allocate an accumulator.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionMismatch("Matrix: data length " + std::to_string(data_.size()) + " != " +
                              std::to_string(rows_) + "x" + std::to_string(cols_));
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i]))
        throw NonFiniteValue("Matrix: non-finite entry at flat index " + std::to_string(i));
  }

  static Matrix zeros(std::size_t rows, std::size_t cols) {
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_.assign(rows * cols, T(0));
    return m;
  }

  static Matrix identity(std::size_t n) {
    auto m = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  template <typename U>
  Matrix<U> cast() const {
    auto out = Matrix<U>::zeros(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.flat()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename A, typename B>
auto dot(const A& a, const B& b) {
  using T = std::remove_cvref_t<decltype(a[0])>;
  T acc = T(0);
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

template <typename A>
auto norm(const A& a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
T clamp_unit(T v) {
  return std::clamp(v, T(-1), T(1));
}

template <typename T>
T cosine_sim(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size())
    throw DimensionMismatch("cosine_sim: dimensions " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
  const T na = norm(a);
  const T nb = norm(b);
  if (!(na > T(0)) || !(nb > T(0))) throw DegenerateInput("cosine_sim: zero-norm vector");
  return clamp_unit(dot(a, b) / (na * nb));
}

template <typename T>
T cosine_sim(const std::vector<T>& a, const std::vector<T>& b) {
  return cosine_sim(std::span<const T>(a), std::span<const T>(b));
}

template <typename T>
Matrix<T> row_normalize(const Matrix<T>& m) {
  auto out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const T n = norm(m.row(r));
    if (!(n > T(0))) throw DegenerateInput("row_normalize: zero row at index " + std::to_string(r));
    for (auto& v : out.row(r)) v /= n;
  }
  return out;
}

/// Entry (i, j) = cosine similarity of a.row(i) and b.row(j), clamped to
/// [-1, 1]. Rows are normalized once and compared with dot(); callers that
/// mix this with per-vector similarities must use the same path so equal
/// inputs give bitwise-equal similarities.
template <typename T>
Matrix<T> pairwise_cosine(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols())
    throw DimensionMismatch("pairwise_cosine: inner dimensions " + std::to_string(a.cols()) +
                            " vs " + std::to_string(b.cols()));
  const auto an = row_normalize(a);
  const auto bn = (&a == &b) ? an : row_normalize(b);
  auto out = Matrix<T>::zeros(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = clamp_unit(dot(an.row(i), bn.row(j)));
  return out;
}

/// C = A * B.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) throw DimensionMismatch("matmul: inner dimension mismatch");
  auto out = Matrix<T>::zeros(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T(0)) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// C = A * B^T.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) throw DimensionMismatch("matmul_nt: inner dimension mismatch");
  auto out = Matrix<T>::zeros(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

/// C = A^T * B.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) throw DimensionMismatch("matmul_tn: row count mismatch");
  auto out = Matrix<T>::zeros(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = arow[i];
      if (aki == T(0)) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

template <typename T>
void add_row_bias(Matrix<T>& m, std::span<const T> bias) {
  if (bias.size() != m.cols()) throw DimensionMismatch("add_row_bias: bias length mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias[c];
  }
}

/// Column sums (gradient of a broadcast row bias).
template <typename T>
std::vector<T> column_sums(const Matrix<T>& m) {
  std::vector<T> out(m.cols(), T(0));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += row[c];
  }
  return out;
}

/// In-place numerically stable softmax.
template <typename T>
void softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  const T mx = *std::max_element(v.begin(), v.end());
  T sum = T(0);
  for (auto& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : v) x /= sum;
}

template <typename T>
T log_sum_exp(std::span<const T> v) {
  if (v.empty()) return -std::numeric_limits<T>::infinity();
  const T mx = *std::max_element(v.begin(), v.end());
  T sum = T(0);
  for (auto x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

template <typename T>
T mean(std::span<const T> v) {
  if (v.empty()) return T(0);
  T s = T(0);
  for (auto x : v) s += x;
  return s / static_cast<T>(v.size());
}

template <typename T>
Matrix<T> vstack(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) throw DimensionMismatch("vstack: column mismatch");
  auto out = Matrix<T>::zeros(a.rows() + b.rows(), a.cols());
  std::copy(a.flat().begin(), a.flat().end(), out.flat().begin());
  std::copy(b.flat().begin(), b.flat().end(), out.flat().begin() + a.size());
  return out;
}

}  // namespace hp
