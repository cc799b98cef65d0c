#pragma once

#include "hybrid/types.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace hybrid {

inline constexpr double kDefaultRankTol = 1e-8;

/// Per-step query, key and value vectors of one head, one row per step.
template <typename Scalar>
struct TokenSequence {
  Matrix<Scalar> queries;  // T x d_k
  Matrix<Scalar> keys;     // T x d_k
  Matrix<Scalar> values;   // T x d_v

  Index length() const { return keys.rows(); }
  Index key_dim() const { return keys.cols(); }
  Index value_dim() const { return values.cols(); }

  /// Steps [begin, begin + count) as a new sequence.
  TokenSequence slice(Index begin, Index count) const {
    return {queries.middleRows(begin, count), keys.middleRows(begin, count),
            values.middleRows(begin, count)};
  }
};

template <typename Scalar>
void check_sequence(const TokenSequence<Scalar>& seq) {
  require_shape(seq.length() >= 1, "token sequence must have at least one step");
  require_shape(seq.queries.rows() == seq.length() && seq.values.rows() == seq.length(),
                "queries, keys and values must have one row per step");
  require_shape(seq.queries.cols() == seq.keys.cols(),
                "query and key dimensions differ: " + std::to_string(seq.queries.cols()) +
                    " vs " + std::to_string(seq.keys.cols()));
  if (!all_finite(seq.queries) || !all_finite(seq.keys) || !all_finite(seq.values))
    throw NumericalError("token sequence contains non-finite entries");
}

/// Random sequence with i.i.d. N(0, scale^2) queries/keys and N(0,1) values.
inline TokenSequence<double> random_sequence(Index length, Index key_dim, Index value_dim,
                                             Rng& rng, double scale = 1.0) {
  TokenSequence<double> seq;
  seq.queries = random_normal(length, key_dim, rng, scale);
  seq.keys = random_normal(length, key_dim, rng, scale);
  seq.values = random_normal(length, value_dim, rng);
  return seq;
}

namespace detail {

// Causal softmax over scores restricted to j in [i - window + 1, i].
template <typename Scalar>
Matrix<Scalar> banded_softmax(const TokenSequence<Scalar>& seq, Index window) {
  check_sequence(seq);
  using std::exp;
  const Index T = seq.length();
  Matrix<Scalar> M = Matrix<Scalar>::Zero(T, T);
  for (Index i = 0; i < T; ++i) {
    const Index first = std::max<Index>(0, i - window + 1);
    const Index count = i - first + 1;
    Vector<Scalar> scores = seq.keys.middleRows(first, count) * seq.queries.row(i).transpose();
    const Scalar peak = scores.maxCoeff();
    Scalar total(0);
    for (Index j = 0; j < count; ++j) {
      scores(j) = exp(scores(j) - peak);
      total += scores(j);
    }
    for (Index j = 0; j < count; ++j) M(i, first + j) = scores(j) / total;
  }
  return M;
}

}  // namespace detail

/// Causal softmax attention mixer: M(i,j) = exp(q_i.k_j) / sum_{j'<=i} exp(q_i.k_j').
template <typename Scalar>
Matrix<Scalar> build_attention_mixer(const TokenSequence<Scalar>& seq) {
  return detail::banded_softmax(seq, seq.length());
}

/// Sliding-window mixer: each row renormalised over its last `window` positions.
template <typename Scalar>
Matrix<Scalar> build_swa_mixer(const TokenSequence<Scalar>& seq, Index window) {
  require(window >= 1, "window must be >= 1, got " + std::to_string(window));
  return detail::banded_softmax(seq, window);
}

template <typename Derived>
bool is_lower_triangular(const Eigen::MatrixBase<Derived>& M) {
  if (M.rows() != M.cols()) return false;
  for (Index j = 1; j < M.cols(); ++j)
    for (Index i = 0; i < j; ++i)
      if (M(i, j) != 0) return false;
  return true;
}

/// Rank profile of the past-to-future blocks H_k = M[k.., ..k) over every cut.
struct HankelProfile {
  std::vector<Index> ranks;                 // ranks[k-1] for cut k = 1..T-1
  std::vector<VectorXd> singular_values;    // descending, per cut
  Index n_min = 0;

  Index cuts() const { return static_cast<Index>(ranks.size()); }
};

/// Number of singular values above rank_tol * largest.
inline Index numerical_rank(const VectorXd& singular_values, double rank_tol) {
  if (singular_values.size() == 0 || singular_values(0) <= 0.0) return 0;
  const double threshold = rank_tol * singular_values(0);
  return static_cast<Index>((singular_values.array() > threshold).count());
}

inline MatrixXd hankel_block(const MatrixXd& M, Index cut) {
  const Index T = M.rows();
  return M.block(cut, 0, T - cut, cut);
}

template <typename Derived>
HankelProfile hankel_profile(const Eigen::MatrixBase<Derived>& mixer,
                             double rank_tol = kDefaultRankTol) {
  require(rank_tol > 0.0 && rank_tol < 1.0, "rank_tol must lie in (0, 1)");
  const MatrixXd M = mixer.template cast<double>();
  require_shape(is_lower_triangular(M), "mixer must be square and lower-triangular");
  HankelProfile profile;
  const Index T = M.rows();
  for (Index cut = 1; cut < T; ++cut) {
    Eigen::JacobiSVD<MatrixXd> svd(hankel_block(M, cut));
    VectorXd sv = svd.singularValues();
    const Index rank = numerical_rank(sv, rank_tol);
    profile.ranks.push_back(rank);
    profile.singular_values.push_back(std::move(sv));
    profile.n_min = std::max(profile.n_min, rank);
  }
  return profile;
}

}  // namespace hybrid
