// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace specache {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw InvalidArgument("matrix data length " + std::to_string(data_.size()) + " != " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }
}

void Matrix::append_row(std::span<const float> values) {
  if (rows_ == 0 && data_.empty()) {
    cols_ = values.size();
  } else if (values.size() != cols_) {
    throw InvalidArgument("append_row: width " + std::to_string(values.size()) +
                          " != " + std::to_string(cols_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

void Matrix::erase_leading_rows(std::size_t count) {
  if (count > rows_) throw InvalidArgument("erase_leading_rows: not enough rows");
  data_.erase(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(count * cols_));
  rows_ -= count;
}

bool Matrix::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

AttendMask::AttendMask(std::size_t rows, std::size_t cols, bool visible)
    : rows_(rows), cols_(cols), cells_(rows * cols, visible ? 1 : 0) {}

AttendMask AttendMask::causal(std::size_t rows, std::size_t cols, std::size_t offset) {
  AttendMask mask(rows, cols, false);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols && c <= offset + r; ++c) mask.set(r, c, true);
  }
  return mask;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw InvalidArgument("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                          " vs " + std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const float lhs = a(i, p);
      auto src = b.row(p);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += lhs * src[j];
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("matmul_transposed: widths differ (" + std::to_string(a.cols()) +
                          " vs " + std::to_string(b.cols()) + ")");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto lhs = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto rhs = b.row(j);
      float acc = 0.0f;
      for (std::size_t p = 0; p < lhs.size(); ++p) acc += lhs[p] * rhs[p];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix masked_softmax_rows(const Matrix& scores, const AttendMask& mask) {
  if (mask.rows() != scores.rows() || mask.cols() != scores.cols()) {
    throw InvalidArgument("masked_softmax_rows: mask shape differs from scores");
  }
  Matrix out(scores.rows(), scores.cols());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    float peak = -std::numeric_limits<float>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < scores.cols(); ++c) {
      if (!mask.visible(r, c)) continue;
      any = true;
      peak = std::max(peak, scores(r, c));
    }
    if (!any) throw InvalidArgument("masked_softmax_rows: row " + std::to_string(r) + " fully masked");

    double total = 0.0;
    for (std::size_t c = 0; c < scores.cols(); ++c) {
      if (!mask.visible(r, c)) continue;
      const float e = std::exp(scores(r, c) - peak);
      out(r, c) = e;
      total += e;
    }
    for (std::size_t c = 0; c < scores.cols(); ++c) {
      out(r, c) = mask.visible(r, c) ? static_cast<float>(out(r, c) / total) : 0.0f;
    }
  }
  return out;
}

std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain, float eps) {
  if (x.size() != gain.size()) throw InvalidArgument("rmsnorm: gain length differs from input");
  if (!(eps > 0.0f)) throw InvalidArgument("rmsnorm: eps must be positive");
  float sum_sq = 0.0f;
  for (float v : x) sum_sq += v * v;
  const float mean_sq = x.empty() ? 0.0f : sum_sq / static_cast<float>(x.size());
  const float inv = 1.0f / std::sqrt(mean_sq + eps);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * gain[i] * inv;
  return out;
}

std::vector<float> rope_apply(std::span<const float> x, std::size_t position, double base) {
  if (x.size() % 2 != 0) throw InvalidArgument("rope_apply: odd vector length");
  std::vector<float> out(x.size());
  const double dim = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size() / 2; ++i) {
    const double angle =
        static_cast<double>(position) * std::pow(base, -2.0 * static_cast<double>(i) / dim);
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const float a = x[2 * i];
    const float b = x[2 * i + 1];
    out[2 * i] = a * c - b * s;
    out[2 * i + 1] = a * s + b * c;
  }
  return out;
}

std::size_t argmax_row(std::span<const float> row) {
  if (row.empty()) throw InvalidArgument("argmax_row: empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace specache
