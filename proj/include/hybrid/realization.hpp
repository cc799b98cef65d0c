#pragma once

#include "hybrid/mixing.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace hybrid {

/// How the current input reaches the current output.
///
/// PastOnlyState: the state entering step t summarises inputs strictly before t,
///   s_{t+1} = s_t A_t + v_t B_t,  y_t = s_t C_t + v_t D_t,
///   so T(i,j) = B_j A_{j+1} ... A_{i-1} C_i for i > j and T(i,i) = D_i.
/// CurrentInclusiveState: the state is updated before the readout,
///   s_t = s_{t-1} A_t + v_t B_t,  y_t = s_t C_t + v_t D_t,
///   so T(i,j) = B_j A_{j+1} ... A_i C_i for i > j and T(i,i) = B_i C_i + D_i.
enum class Convention { PastOnlyState, CurrentInclusiveState };

std::string_view to_string(Convention c);
Convention parse_convention(std::string_view name);

/// Per-step system matrices (A_t, B_t, C_t, D_t) of a scalar-input LTV system.
template <typename Scalar>
struct TimeVaryingRealization {
  Index state_dim = 0;
  Convention convention = Convention::PastOnlyState;
  std::vector<Matrix<Scalar>> A;     // n x n
  std::vector<RowVector<Scalar>> B;  // 1 x n
  std::vector<Vector<Scalar>> C;     // n x 1
  std::vector<Scalar> D;

  Index horizon() const { return static_cast<Index>(D.size()); }
};

using Realization = TimeVaryingRealization<double>;

template <typename Scalar>
void check_realization(const TimeVaryingRealization<Scalar>& R) {
  const auto T = static_cast<std::size_t>(R.horizon());
  require_shape(R.A.size() == T && R.B.size() == T && R.C.size() == T,
                "realization sequences must all have horizon length");
  const Index n = R.state_dim;
  require_shape(n >= 0, "state dimension must be non-negative");
  for (std::size_t t = 0; t < T; ++t) {
    require_shape(R.A[t].rows() == n && R.A[t].cols() == n, "A_t must be n x n");
    require_shape(R.B[t].size() == n && R.C[t].size() == n, "B_t and C_t must have n entries");
    if (!all_finite(R.A[t]) || !all_finite(R.B[t]) || !all_finite(R.C[t]) ||
        !std::isfinite(value_of(R.D[t])))
      throw NumericalError("realization has non-finite entries at step " + std::to_string(t));
  }
}

/// Dense T x T finite-horizon input-output matrix of a realization.
template <typename Scalar>
Matrix<Scalar> io_matrix(const TimeVaryingRealization<Scalar>& R, Index T) {
  check_realization(R);
  require(T >= 0 && T <= R.horizon(), "horizon exceeds the realization length");
  Matrix<Scalar> M = Matrix<Scalar>::Zero(T, T);
  const bool inclusive = R.convention == Convention::CurrentInclusiveState;
  for (Index j = 0; j < T; ++j) {
    RowVector<Scalar> s = R.B[j];
    M(j, j) = R.D[j] + (inclusive ? Scalar(s.dot(R.C[j].transpose())) : Scalar(0));
    for (Index i = j + 1; i < T; ++i) {
      if (inclusive) {
        s = s * R.A[i];
        M(i, j) = s.dot(R.C[i].transpose());
      } else {
        M(i, j) = s.dot(R.C[i].transpose());
        s = s * R.A[i];
      }
    }
  }
  return M;
}

struct RealizeOptions {
  double rank_tol = kDefaultRankTol;
  // Seed of the random matrix that degenerate bases are completed against.
  std::uint64_t pad_seed = kDefaultSeed;
  // Largest accepted reconstruction error, relative to max(1, max|M|).
  double consistency_tol = 1e-6;
};

/// Minimal LTV realization of a causal mixer, in the past-only-state convention.
///
/// The state at cut k holds coordinates of the future output tail in an
/// orthonormal basis Q_k of im(H_k) built from its left singular vectors.
/// Throws NumericalError if the assembled system does not reproduce M.
Realization realize(const MatrixXd& mixer, const RealizeOptions& options = {});

struct MinimalityReport {
  double reconstruction_error = 0.0;
  Index state_dim = 0;
  Index n_min = 0;
  bool is_minimal = false;
};

MinimalityReport verify_minimality(const Realization& R, const MatrixXd& mixer,
                                   double rank_tol = kDefaultRankTol);

/// Copy of R with one extra state coordinate that no input can reach.
Realization with_unreachable_state(const Realization& R);

}  // namespace hybrid
