#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace hybrid {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;
using RowVectorXd = RowVector<double>;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent dimensions between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A parameter outside its admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a numerically inconsistent result.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Plain double value of a scalar, including forward-mode autodiff scalars.
template <typename Scalar>
double value_of(const Scalar& x) {
  if constexpr (std::is_arithmetic_v<Scalar>) {
    return static_cast<double>(x);
  } else {
    return value_of(x.value());
  }
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      if (!std::isfinite(value_of(m(i, j)))) return false;
  return true;
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw RangeError(message);
}

inline void require_shape(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

using Rng = std::mt19937_64;

inline constexpr std::uint64_t kDefaultSeed = 42;

/// Matrix with i.i.d. N(0, stddev^2) entries, filled column-major.
inline MatrixXd random_normal(Index rows, Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

inline double random_uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

template <typename Scalar>
Scalar sigmoid(const Scalar& x) {
  using std::exp;
  return Scalar(1) / (Scalar(1) + exp(-x));
}

}  // namespace hybrid
