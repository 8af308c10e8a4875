// SPDX-License-Identifier: Apache-2.0
#include "rbwp/diff/array.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>

namespace rbwp {

namespace {
using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError ShapeError::mismatch(const char* op, const Shape& a,
                                const Shape& b) {
  return ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) +
                    " and " + to_string(b));
}

std::size_t element_count(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Array::Array(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("array dimensions must be positive, got " +
                                 to_string(shape_));
}

Array::Array(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("array dimensions must be positive, got " +
                                 to_string(shape_));
  if (element_count(shape_) != data_.size())
    throw ShapeError("shape " + to_string(shape_) + " needs " +
                     std::to_string(element_count(shape_)) + " values, got " +
                     std::to_string(data_.size()));
}

std::size_t Array::rows() const {
  if (rank() != 2) throw ShapeError("expected 2-D array, got " + to_string(shape_));
  return shape_[0];
}

std::size_t Array::cols() const {
  if (rank() != 2) throw ShapeError("expected 2-D array, got " + to_string(shape_));
  return shape_[1];
}

double Array::item() const {
  if (data_.size() != 1)
    throw ShapeError("item() needs a single-element array, got " +
                     to_string(shape_));
  return data_[0];
}

bool Array::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Array Array::reshaped(Shape shape) const {
  if (element_count(shape) != data_.size())
    throw ShapeError::mismatch("reshape", shape_, shape);
  return Array(std::move(shape), data_);
}

bool Array::bitwise_equal(const Array& other) const noexcept {
  if (shape_ != other.shape_) return false;
  return data_.empty() ||
         std::memcmp(data_.data(), other.data_.data(),
                     data_.size() * sizeof(double)) == 0;
}

Array transpose(const Array& a) {
  const auto r = a.rows(), c = a.cols();
  Array out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Array matmul(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError::mismatch("matmul", a.shape(), b.shape());
  Array out({a.rows(), b.cols()});
  Eigen::Map<const RowMatrix> ma(a.values().data(), a.rows(), a.cols());
  Eigen::Map<const RowMatrix> mb(b.values().data(), b.rows(), b.cols());
  Eigen::Map<RowMatrix> mo(out.values().data(), out.rows(), out.cols());
  mo.noalias() = ma * mb;
  return out;
}

std::vector<double> singular_values(const Array& a) {
  if (a.rank() != 2)
    throw ShapeError("nuclear_norm: expected 2-D array, got " +
                     to_string(a.shape()));
  // Orthogonalize columns of the taller orientation; singular values are the
  // resulting column norms.
  Array work = a.rows() >= a.cols() ? a : transpose(a);
  const std::size_t m = work.rows(), n = work.cols();
  constexpr double kTol = 1e-15;
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          const double up = work.at(i, p), uq = work.at(i, q);
          alpha += up * up;
          beta += uq * uq;
          gamma += up * uq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta))
          continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double up = work.at(i, p), uq = work.at(i, q);
          work.at(i, p) = c * up - s * uq;
          work.at(i, q) = s * up + c * uq;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) s += work.at(i, j) * work.at(i, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

double nuclear_norm(const Array& a) {
  const auto sv = singular_values(a);
  return std::accumulate(sv.begin(), sv.end(), 0.0);
}

}  // namespace rbwp
