#include "hybrid/mixing.hpp"

#include <doctest.h>

using namespace hybrid;

namespace {

// Direct softmax over the scores of row i, columns [first, i].
MatrixXd softmax_oracle(const TokenSequence<double>& seq, Index window) {
  const Index T = seq.length();
  MatrixXd M = MatrixXd::Zero(T, T);
  for (Index i = 0; i < T; ++i) {
    const Index first = std::max<Index>(0, i - window + 1);
    double total = 0.0;
    for (Index j = first; j <= i; ++j) total += std::exp(seq.queries.row(i).dot(seq.keys.row(j)));
    for (Index j = first; j <= i; ++j) M(i, j) = std::exp(seq.queries.row(i).dot(seq.keys.row(j))) / total;
  }
  return M;
}

TokenSequence<double> constant_scores(Index T) {
  return {MatrixXd::Zero(T, 2), MatrixXd::Ones(T, 2), MatrixXd::Ones(T, 1)};
}

}  // namespace

TEST_CASE("single token mixer is one") {
  Rng rng(1);
  const auto M = build_attention_mixer(random_sequence(1, 3, 1, rng));
  CHECK(M.rows() == 1);
  CHECK(M(0, 0) == 1.0);
}

TEST_CASE("equal scores give uniform causal averaging") {
  const MatrixXd M = build_attention_mixer(constant_scores(5));
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j) CHECK(M(i, j) == doctest::Approx(j <= i ? 1.0 / double(i + 1) : 0.0));
}

TEST_CASE("sharp basis queries concentrate on the diagonal and match direct softmax") {
  TokenSequence<double> seq{10.0 * MatrixXd::Identity(3, 3), 10.0 * MatrixXd::Identity(3, 3), MatrixXd::Ones(3, 1)};
  const MatrixXd M = build_attention_mixer(seq);
  CHECK((M - softmax_oracle(seq, 3)).cwiseAbs().maxCoeff() < 1e-14);
  for (Index i = 0; i < 3; ++i) CHECK(M(i, i) > 0.99);
}

TEST_CASE("random mixers match direct softmax and are row stochastic") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto seq = random_sequence(12, 4, 1, rng);
    const MatrixXd M = build_attention_mixer(seq);
    CHECK((M - softmax_oracle(seq, 12)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((M.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(is_lower_triangular(M));
  }
}

TEST_CASE("swa with a window covering the history equals full attention") {
  Rng rng(3);
  const auto seq = random_sequence(9, 4, 1, rng);
  CHECK(build_swa_mixer(seq, 9) == build_attention_mixer(seq));
  CHECK(build_swa_mixer(seq, 20) == build_attention_mixer(seq));
}

TEST_CASE("swa window one is the identity") {
  Rng rng(4);
  CHECK(build_swa_mixer(random_sequence(6, 3, 1, rng), 1) == MatrixXd::Identity(6, 6));
}

TEST_CASE("swa window two with uniform scores") {
  const MatrixXd M = build_swa_mixer(constant_scores(4), 2);
  MatrixXd expected(4, 4);
  expected << 1, 0, 0, 0, .5, .5, 0, 0, 0, .5, .5, 0, 0, 0, .5, .5;
  CHECK((M - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("swa rejects a zero window") {
  Rng rng(4);
  CHECK_THROWS_AS(build_swa_mixer(random_sequence(3, 2, 1, rng), 0), RangeError);
}

TEST_CASE("identity mixer has no Hankel rank") {
  const HankelProfile p = hankel_profile(MatrixXd::Identity(5, 5));
  CHECK(p.n_min == 0);
  CHECK(p.cuts() == 4);
  for (Index r : p.ranks) CHECK(r == 0);
}

TEST_CASE("uniform causal averaging T=3 has rank one at both cuts") {
  const MatrixXd M = build_attention_mixer(constant_scores(3));
  const HankelProfile p = hankel_profile(M);
  REQUIRE(p.ranks.size() == 2);
  CHECK(p.ranks[0] == 1);
  CHECK(p.ranks[1] == 1);
  CHECK(p.n_min == 1);
  // Block at cut 1 is [.5, 1/3]^T; its only singular value is its norm.
  CHECK(p.singular_values[0](0) == doctest::Approx(std::sqrt(0.25 + 1.0 / 9.0)));
  CHECK(p.singular_values[1](0) == doctest::Approx(std::sqrt(2.0 / 9.0)));
}

TEST_CASE("Hankel blocks of a dense mixer are read off the past-to-future corner") {
  MatrixXd M = MatrixXd::Zero(4, 4);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j <= i; ++j) M(i, j) = double(10 * i + j);
  const MatrixXd H = hankel_block(M, 2);
  CHECK(H.rows() == 2);
  CHECK(H.cols() == 2);
  CHECK(H(0, 0) == 20.0);
  CHECK(H(1, 1) == 31.0);
}

TEST_CASE("swa caps the Hankel rank at the window") {
  Rng rng(11);
  for (Index w : {1, 2, 3, 5}) {
    const auto seq = random_sequence(16, 4, 1, rng, 0.8);
    CHECK(hankel_profile(build_swa_mixer(seq, w)).n_min <= w);
  }
}

TEST_CASE("hankel profile rejects non-causal input and bad tolerances") {
  CHECK_THROWS_AS(hankel_profile(MatrixXd::Ones(3, 3)), ShapeError);
  CHECK_THROWS_AS(hankel_profile(MatrixXd::Identity(3, 3), 0.0), RangeError);
}

TEST_CASE("numerical rank counts values above the relative threshold") {
  VectorXd sv(3);
  sv << 1.0, 1e-6, 1e-12;
  CHECK(numerical_rank(sv, 1e-8) == 2);
  CHECK(numerical_rank(VectorXd::Zero(2), 1e-8) == 0);
}
