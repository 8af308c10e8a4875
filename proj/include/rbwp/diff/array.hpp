// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rbwp {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

/// Raised when operands have incompatible shapes. The message names both.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
  static ShapeError mismatch(const char* op, const Shape& a, const Shape& b);
};

/// Raised when a computation produces or receives non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major array of reals. Value semantics.
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);

  static Array scalar(double v) { return Array({1}, std::vector<double>{v}); }
  static Array matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
    return Array({rows, cols}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  // 2-D views; valid only for rank 2.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * shape_.back(),
                                                  shape_.back());
  }

  double item() const;
  bool all_finite() const noexcept;
  Array reshaped(Shape shape) const;

  /// Exact equality of shape and every value's bit pattern.
  bool bitwise_equal(const Array& other) const noexcept;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t element_count(const Shape& shape) noexcept;

Array transpose(const Array& a);
Array matmul(const Array& a, const Array& b);

/// Singular values of a 2-D array, descending (one-sided Jacobi).
std::vector<double> singular_values(const Array& a);

/// Sum of singular values. Rejects arrays that are not 2-D.
double nuclear_norm(const Array& a);

}  // namespace rbwp
