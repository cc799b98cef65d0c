#pragma once

#include "hybrid/types.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace hybrid {

/// Interval [lower, upper] containing the spectrum of the SPD operator.
struct SpectralBounds {
  double lower = 0.0;
  double upper = 0.0;
};

inline void check_bounds(const SpectralBounds& b) {
  require(b.lower > 0.0, "spectral lower bound must be positive");
  require(b.upper >= b.lower, "spectral upper bound must be >= lower bound");
}

template <typename Scalar>
struct ChebyshevResult {
  Vector<Scalar> solution;
  std::vector<double> residual_history;  // ||r_k|| for k = 1..iterations
};

/// Chebyshev iteration for (H + lambda I) x = rhs, starting from x = 0.
///
/// `apply_h` maps a vector to H * vector. Only matrix-vector products with H are
/// used. With bounds [a, b] covering the spectrum of H + lambda I the residual
/// obeys ||r_k|| <= ||r_0|| / T_k((b + a) / (b - a)).
template <typename Scalar, typename ApplyH>
ChebyshevResult<Scalar> chebyshev_solve(ApplyH&& apply_h, const Scalar& lambda,
                                        const Vector<Scalar>& rhs, int iterations,
                                        const SpectralBounds& bounds) {
  check_bounds(bounds);
  require(iterations >= 1, "chebyshev needs at least one iteration");
  const Scalar center((bounds.upper + bounds.lower) / 2.0);
  const Scalar half_width((bounds.upper - bounds.lower) / 2.0);
  auto apply = [&](const Vector<Scalar>& x) -> Vector<Scalar> {
    Vector<Scalar> y = apply_h(x);
    y += lambda * x;
    return y;
  };

  ChebyshevResult<Scalar> out;
  out.residual_history.reserve(static_cast<std::size_t>(iterations));
  Vector<Scalar> x = Vector<Scalar>::Zero(rhs.size());
  Vector<Scalar> r = rhs;
  Vector<Scalar> d = r / center;
  const bool point_spectrum = bounds.upper == bounds.lower;
  Scalar rho = point_spectrum ? Scalar(0) : Scalar(half_width / center);
  for (int k = 1; k <= iterations; ++k) {
    x += d;
    r -= apply(d);
    const double residual = value_of(r.norm());
    if (!std::isfinite(residual) || !all_finite(x))
      throw NumericalError("chebyshev iterate became non-finite at iteration " + std::to_string(k));
    out.residual_history.push_back(residual);
    if (point_spectrum) {
      d = r / center;
    } else {
      const Scalar rho_next = Scalar(1) / (Scalar(2) * center / half_width - rho);
      d = (rho_next * rho) * d + (Scalar(2) * rho_next / half_width) * r;
      rho = rho_next;
    }
  }
  out.solution = std::move(x);
  return out;
}

/// Classical worst-case residual ||r_0|| / T_k(sigma) after k iterations.
inline double chebyshev_residual_bound(int k, const SpectralBounds& b, double initial_residual) {
  check_bounds(b);
  if (k == 0) return initial_residual;
  if (b.upper == b.lower) return 0.0;
  const double sigma = (b.upper + b.lower) / (b.upper - b.lower);
  return initial_residual / std::cosh(k * std::acosh(sigma));
}

/// Geometric envelope 2 ((sqrt(kappa) - 1) / (sqrt(kappa) + 1))^k with kappa = b / a.
inline double chebyshev_geometric_bound(int k, const SpectralBounds& b) {
  check_bounds(b);
  const double root = std::sqrt(b.upper / b.lower);
  return 2.0 * std::pow((root - 1.0) / (root + 1.0), k);
}

}  // namespace hybrid
