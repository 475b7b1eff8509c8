// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 kernels used by the decoder. Everything here is pure and has
// no knowledge of cache tiers.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace specache {

/// Thrown when a caller hands an operation malformed input.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a stateful component is driven out of order.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Row-major float32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  /// Appends one row; an empty matrix adopts the row's width.
  void append_row(std::span<const float> values);

  void erase_leading_rows(std::size_t count);

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Per-cell visibility for attention scores: true means the cell participates.
class AttendMask {
 public:
  AttendMask(std::size_t rows, std::size_t cols, bool visible = true);

  /// Lower-triangular mask where row i sees columns [0, offset + i].
  static AttendMask causal(std::size_t rows, std::size_t cols, std::size_t offset = 0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool visible(std::size_t r, std::size_t c) const { return cells_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool visible) { cells_[r * cols_ + c] = visible ? 1 : 0; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::uint8_t> cells_;
};

/// a · b, accumulating left to right over the inner dimension.
Matrix matmul(const Matrix& a, const Matrix& b);

/// a · bᵀ with the same accumulation order as matmul.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

/// Row-wise softmax restricted to visible cells. Hidden cells come out as
/// exactly 0. Exponentials are float32; the row normalizer accumulates in
/// double so long rows still sum to 1 within 1e-6.
Matrix masked_softmax_rows(const Matrix& scores, const AttendMask& mask);

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, float eps);

/// Rotates pairs (x[2i], x[2i+1]) by position * base^(-2i/|x|).
std::vector<float> rope_apply(std::span<const float> x, std::size_t position, double base = 10000.0);

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax_row(std::span<const float> row);

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace specache
