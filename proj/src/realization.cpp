#include "hybrid/realization.hpp"

#include <algorithm>
#include <cmath>

namespace hybrid {

std::string_view to_string(Convention c) {
  switch (c) {
    case Convention::PastOnlyState:
      return "past_only_state";
    case Convention::CurrentInclusiveState:
      return "current_inclusive_state";
  }
  return "unknown";
}

Convention parse_convention(std::string_view name) {
  if (name == "past_only_state") return Convention::PastOnlyState;
  if (name == "current_inclusive_state") return Convention::CurrentInclusiveState;
  throw RangeError("unknown convention tag: " + std::string(name));
}

namespace {

// Orthonormal basis of width `width` whose leading columns span im(H).
// Columns beyond the rank are completed by Gram-Schmidt against random
// vectors; once the ambient space is exhausted the remaining columns are zero.
MatrixXd future_tail_basis(const MatrixXd& H, Index width, double rank_tol, Rng& rng) {
  const Index m = H.rows();
  MatrixXd Q = MatrixXd::Zero(m, width);
  Eigen::JacobiSVD<MatrixXd> svd(H, Eigen::ComputeThinU);
  const Index rank = numerical_rank(svd.singularValues(), rank_tol);
  Q.leftCols(rank) = svd.matrixU().leftCols(rank);

  const Index target = std::min(width, m);
  Index filled = rank;
  const MatrixXd candidates = random_normal(m, std::max<Index>(m, 1), rng);
  for (Index c = 0; c < candidates.cols() && filled < target; ++c) {
    VectorXd v = candidates.col(c);
    for (int pass = 0; pass < 2; ++pass) v -= Q.leftCols(filled) * (Q.leftCols(filled).transpose() * v);
    const double norm = v.norm();
    if (norm > 1e-8) Q.col(filled++) = v / norm;
  }
  if (filled < target) throw NumericalError("could not complete the future-tail basis");
  return Q;
}

}  // namespace

Realization realize(const MatrixXd& M, const RealizeOptions& options) {
  require_shape(M.rows() >= 1, "mixer must be non-empty");
  if (!all_finite(M)) throw NumericalError("mixer has non-finite entries");
  const HankelProfile profile = hankel_profile(M, options.rank_tol);
  const Index T = M.rows();
  const Index n = profile.n_min;

  // bases[k] spans the reachable future tails after cut k (k = 1..T-1).
  Rng rng(options.pad_seed);
  std::vector<MatrixXd> bases(static_cast<std::size_t>(T));
  for (Index cut = 1; cut < T; ++cut)
    bases[cut] = future_tail_basis(hankel_block(M, cut), n, options.rank_tol, rng);

  Realization R;
  R.state_dim = n;
  R.convention = Convention::PastOnlyState;
  R.A.assign(T, MatrixXd::Zero(n, n));
  R.B.assign(T, RowVectorXd::Zero(n));
  R.C.assign(T, VectorXd::Zero(n));
  R.D.resize(T);
  for (Index t = 0; t < T; ++t) {
    R.D[t] = M(t, t);
    if (n == 0) continue;
    if (t + 1 < T) {
      // New input's contribution to the tail, in the coordinates after cut t+1.
      R.B[t] = (bases[t + 1].transpose() * M.col(t).tail(T - t - 1)).transpose();
    }
    if (t >= 1) {
      // Output at t caused by the past is the first entry of the tail.
      R.C[t] = bases[t].row(0).transpose();
    }
    if (t >= 1 && t + 1 < T) {
      // Drop the emitted output, then change basis from Q_t to Q_{t+1}.
      R.A[t] = (bases[t + 1].transpose() * bases[t].bottomRows(T - t - 1)).transpose();
    }
  }

  const double error = (io_matrix(R, T) - M).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
  if (!(error <= options.consistency_tol * scale))
    throw NumericalError("realization at n = " + std::to_string(n) +
                         " does not reproduce the mixer (max error " + std::to_string(error) +
                         "); rank_tol truncated significant directions");
  return R;
}

MinimalityReport verify_minimality(const Realization& R, const MatrixXd& M, double rank_tol) {
  require_shape(M.rows() == R.horizon() && M.cols() == R.horizon(),
                "mixer and realization horizons differ");
  MinimalityReport report;
  report.reconstruction_error =
      M.size() == 0 ? 0.0 : (io_matrix(R, R.horizon()) - M).cwiseAbs().maxCoeff();
  report.state_dim = R.state_dim;
  report.n_min = hankel_profile(M, rank_tol).n_min;
  report.is_minimal = report.state_dim == report.n_min;
  return report;
}

Realization with_unreachable_state(const Realization& R) {
  check_realization(R);
  const Index n = R.state_dim;
  Realization out = R;
  out.state_dim = n + 1;
  for (std::size_t t = 0; t < R.D.size(); ++t) {
    MatrixXd A = MatrixXd::Zero(n + 1, n + 1);
    A.topLeftCorner(n, n) = R.A[t];
    A(n, n) = 1.0;
    out.A[t] = A;
    RowVectorXd B = RowVectorXd::Zero(n + 1);
    B.head(n) = R.B[t];
    out.B[t] = B;
    VectorXd C = VectorXd::Ones(n + 1);
    C.head(n) = R.C[t];
    out.C[t] = C;
  }
  return out;
}

}  // namespace hybrid
