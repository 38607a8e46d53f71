// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "ear/error.hpp"

namespace ear {

using Dims = std::vector<std::size_t>;

inline std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Every dimension is positive.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Dims dims, double fill = 0.0) : dims_(std::move(dims)) {
    check_dims();
    values_.assign(dims_product(dims_), fill);
  }

  Tensor(Dims dims, std::vector<double> values) : dims_(std::move(dims)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != dims_product(dims_)) {
      throw ShapeError("tensor: " + std::to_string(values_.size()) + " values do not fill dims " +
                       dims_to_string(dims_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  /// Row-major literal: matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values));
  }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::size_t rows() const {
    require_matrix();
    return dims_[0];
  }
  std::size_t cols() const {
    require_matrix();
    return dims_[1];
  }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * dims_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * dims_[1] + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& storage() const noexcept { return values_; }

  /// Same values, new dims of equal product.
  Tensor reshaped(Dims dims) const {
    if (dims_product(dims) != values_.size()) {
      throw ShapeError("reshape: " + dims_to_string(dims_) + " -> " + dims_to_string(dims));
    }
    return Tensor(std::move(dims), values_);
  }

  /// View a rank-1 tensor as 1xN; rank-2 tensors are returned unchanged.
  Tensor as_matrix() const {
    if (rank() == 2) return *this;
    if (rank() == 1) return reshaped({1, dims_[0]});
    throw ShapeError("as_matrix: rank " + std::to_string(rank()) + " tensor " + dims_to_string(dims_));
  }

  Tensor row_slice(std::size_t begin, std::size_t count) const {
    require_matrix();
    if (begin + count > dims_[0] || count == 0) {
      throw ShapeError("row_slice: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                       ") out of " + dims_to_string(dims_));
    }
    const std::size_t c = dims_[1];
    return Tensor({count, c}, std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                                  values_.begin() + static_cast<std::ptrdiff_t>((begin + count) * c)));
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.values_ == b.values_;
  }

 private:
  void check_dims() const {
    for (auto d : dims_) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + dims_to_string(dims_));
    }
  }
  void require_matrix() const {
    if (dims_.size() != 2) throw ShapeError("expected a matrix, got " + dims_to_string(dims_));
  }

  Dims dims_;
  std::vector<double> values_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw ShapeError("max_abs_diff: " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Stack same-width matrices vertically.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      throw ShapeError("concat_rows: " + dims_to_string(parts.front().dims()) + " vs " + dims_to_string(p.dims()));
    }
    r += p.rows();
  }
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& p : parts) values.insert(values.end(), p.storage().begin(), p.storage().end());
  return Tensor({r, c}, std::move(values));
}

}  // namespace ear
