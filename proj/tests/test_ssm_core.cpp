#include "hybrid/ssm_core.hpp"

#include <doctest.h>

using namespace hybrid;

namespace {

StepGates<double> gates(double decay, double write, double lambda = 1.0) { return {decay, write, lambda}; }

VectorXd unit_vector(Index d, Rng& rng) {
  VectorXd k = random_normal(d, 1, rng);
  return k / k.norm();
}

}  // namespace

TEST_CASE("mamba2 without decay accumulates outer products") {
  Rng rng(1);
  const auto seq = random_sequence(7, 3, 2, rng);
  const auto out = ssm_forward(SsmKind::Mamba2, seq, GateTrack<double>::constant(7, 1.0, 1.0, 1.0));
  MatrixXd expected = MatrixXd::Zero(2, 3);
  for (Index t = 0; t < 7; ++t) expected += seq.values.row(t).transpose() * seq.keys.row(t);
  CHECK((out.final_state.S - expected).cwiseAbs().maxCoeff() < 1e-12);
  // Outputs read the state after the write.
  CHECK((out.outputs.row(6).transpose() - expected * seq.queries.row(6).transpose()).norm() < 1e-12);
}

TEST_CASE("gdn with orthonormal keys stores both values") {
  const VectorXd k1 = VectorXd::Unit(3, 0), k2 = VectorXd::Unit(3, 1);
  VectorXd v1(2), v2(2);
  v1 << 1.0, -2.0;
  v2 << 0.5, 3.0;
  auto s = SsmState<double>::zero(SsmKind::GDN, 3, 2);
  s = ssm_step(SsmKind::GDN, s, k1, v1, gates(1.0, 1.0));
  s = ssm_step(SsmKind::GDN, s, k2, v2, gates(1.0, 1.0));
  const MatrixXd expected = v1 * k1.transpose() + v2 * k2.transpose();
  CHECK((s.S - expected).cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.S * k1 == v1);
}

TEST_CASE("gdn scalar recurrence unrolled by hand") {
  // d_k = d_v = 1: S' = gamma (S - beta S k k) + beta v k
  const double gamma = 0.5, beta = 0.8, k1 = 0.6, v1 = 2.0, k2 = -0.4, v2 = 1.5;
  double S = 0.0;
  S = gamma * (S - beta * S * k1 * k1) + beta * v1 * k1;
  S = gamma * (S - beta * S * k2 * k2) + beta * v2 * k2;
  auto s = SsmState<double>::zero(SsmKind::GDN, 1, 1);
  s = ssm_step(SsmKind::GDN, s, VectorXd(VectorXd::Constant(1, k1)), VectorXd(VectorXd::Constant(1, v1)), gates(gamma, beta));
  s = ssm_step(SsmKind::GDN, s, VectorXd(VectorXd::Constant(1, k2)), VectorXd(VectorXd::Constant(1, v2)), gates(gamma, beta));
  CHECK(s.S(0, 0) == doctest::Approx(S).epsilon(1e-15));
}

TEST_CASE("step transitions reproduce the state update") {
  Rng rng(3);
  for (SsmKind kind : {SsmKind::Mamba2, SsmKind::GDN}) {
    const MatrixXd S = random_normal(2, 4, rng);
    const VectorXd k = unit_vector(4, rng), v = random_normal(2, 1, rng);
    const auto g = gates(0.9, 0.7);
    const auto next = ssm_step(kind, SsmState<double>{S, MatrixXd()}, k, v, g);
    const auto zero = ssm_step(kind, SsmState<double>::zero(kind, 4, 2), k, v, g);
    CHECK((next.S - (S * step_transition(kind, k, g) + zero.S)).cwiseAbs().maxCoeff() < 1e-14);
  }
  CHECK_THROWS_AS(step_transition(SsmKind::GKA, VectorXd::Ones(2).eval(), gates(1, 1)), RangeError);
}

TEST_CASE("gate ranges are enforced") {
  auto s = SsmState<double>::zero(SsmKind::GDN, 2, 1);
  const VectorXd k = VectorXd::Ones(2), v = VectorXd::Ones(1);
  CHECK_THROWS_AS(ssm_step(SsmKind::GDN, s, k, v, gates(1.5, 0.5)), RangeError);
  CHECK_THROWS_AS(ssm_step(SsmKind::GDN, s, k, v, gates(0.5, -0.1)), RangeError);
  CHECK_THROWS_AS(ssm_step(SsmKind::GDN, s, VectorXd::Ones(3).eval(), v, gates(0.5, 0.5)), ShapeError);
}

TEST_CASE("info update with zero write leaves the state unchanged") {
  Rng rng(4);
  GkaInfoState<double> info{random_normal(3, 3, rng), random_normal(2, 3, rng)};
  info.H = (info.H * info.H.transpose()).eval();
  const auto out = gka_info_update<double>(info, random_normal(3, 1, rng), random_normal(2, 1, rng), 1.0, 0.0);
  CHECK(out.H == info.H);
  CHECK(out.U == info.U);
}

TEST_CASE("info update without decay adds key outer products") {
  Rng rng(5);
  const VectorXd k1 = random_normal(3, 1, rng), k2 = random_normal(3, 1, rng), v = random_normal(2, 1, rng);
  auto info = GkaInfoState<double>::zero(3, 2);
  info = gka_info_update<double>(info, k1, v, 1.0, 1.0);
  info = gka_info_update<double>(info, k2, v, 1.0, 1.0);
  CHECK((info.H - (k1 * k1.transpose() + k2 * k2.transpose())).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("info update with decay matches the closed-form weighted sum") {
  Rng rng(6);
  const double gamma = 0.9, beta = 0.5;
  std::vector<VectorXd> keys;
  auto info = GkaInfoState<double>::zero(4, 2);
  for (int t = 0; t < 5; ++t) {
    keys.push_back(random_normal(4, 1, rng));
    info = gka_info_update<double>(info, keys.back(), random_normal(2, 1, rng), gamma, beta);
  }
  MatrixXd expected = MatrixXd::Zero(4, 4);
  for (int i = 0; i < 5; ++i) expected += beta * std::pow(gamma, 4 - i) * keys[i] * keys[i].transpose();
  CHECK((info.H - expected).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("gain closed forms") {
  Rng rng(7);
  const VectorXd k = unit_vector(5, rng);
  const VectorXd g0 = gka_gain_from<double>(MatrixXd::Zero(5, 5), k, 0.6, 2.0);
  CHECK((g0 - 0.3 * k).norm() < 1e-15);
  const VectorXd g1 = gka_gain_from<double>(k * k.transpose(), k, 1.0, 1.0);
  CHECK((g1 - 0.5 * k).norm() < 1e-14);
}

TEST_CASE("Sherman-Morrison inverse tracks dense inverses without decay") {
  Rng rng(8);
  const Index d = 6;
  const double lambda = 0.7;
  ShermanMorrisonGain sm(d, lambda);
  MatrixXd H = MatrixXd::Zero(d, d);
  for (int t = 0; t < 10; ++t) {
    const VectorXd k = random_normal(d, 1, rng);
    const double beta = random_uniform(rng, 0.1, 1.0);
    const VectorXd g = sm.update(k, beta);
    H += beta * k * k.transpose();
    const MatrixXd dense = (H + lambda * MatrixXd::Identity(d, d)).inverse();
    CHECK((sm.inverse() - dense).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((g - beta * dense * k).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK_THROWS_AS(sm.update(VectorXd::Ones(d), 0.5, 0.9), RangeError);
}

TEST_CASE("gka output closed forms") {
  Rng rng(9);
  GkaInfoState<double> info{MatrixXd::Zero(3, 3), random_normal(2, 3, rng)};
  const VectorXd q = random_normal(3, 1, rng);
  CHECK((gka_output<double>(info, q, 0.5) - info.U * q / 0.5).norm() < 1e-14);
  info.H = random_normal(3, 3, rng);
  info.H = (info.H * info.H.transpose()).eval();
  info.U.setZero();
  CHECK(gka_output<double>(info, q, 0.5).isZero(0.0));
  CHECK(gka_output<double>(info, q, 0.5, ChebyshevSolve{5}).isZero(0.0));
}

TEST_CASE("Chebyshev on a point spectrum is exact after one iteration") {
  Rng rng(10);
  const VectorXd q = random_normal(4, 1, rng);
  auto zero = [](const VectorXd& z) -> VectorXd { return VectorXd::Zero(z.size()); };
  const auto res = chebyshev_solve<double>(zero, 0.25, q, 1, SpectralBounds{0.25, 0.25});
  CHECK((res.solution - q / 0.25).norm() < 1e-15);
}

TEST_CASE("Chebyshev on diag(1,2,3) with lambda 0.1 converges to the dense solve") {
  VectorXd diag(3);
  diag << 1, 2, 3;
  const VectorXd q = VectorXd::Ones(3);
  auto apply = [&](const VectorXd& z) -> VectorXd { return diag.cwiseProduct(z); };
  const auto res = chebyshev_solve<double>(apply, 0.1, q, 30, SpectralBounds{1.1, 3.1});
  const VectorXd exact = q.cwiseQuotient((diag.array() + 0.1).matrix());
  CHECK((res.solution - exact).norm() <= 1e-8);
}

TEST_CASE("Chebyshev residuals stay under the classical bound and its geometric envelope") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Index d = 16;
    const MatrixXd X = random_normal(d, d, rng);
    const MatrixXd H = X * X.transpose() / double(d);
    const double lambda = 0.3;
    const SpectralBounds b = default_spectral_bounds<double>(H, lambda);
    const VectorXd q = random_normal(d, 1, rng);
    auto apply = [&](const VectorXd& z) -> VectorXd { return H * z; };
    const auto res = chebyshev_solve<double>(apply, lambda, q, 40, b);
    for (int k = 1; k <= 40; ++k) {
      const double r = res.residual_history[static_cast<std::size_t>(k - 1)];
      CHECK(r <= 1.1 * chebyshev_residual_bound(k, b, q.norm()));
      CHECK(r <= 1.1 * chebyshev_geometric_bound(k, b) * q.norm());
    }
  }
}

TEST_CASE("Chebyshev output converges to the exact output with more iterations") {
  Rng rng(12);
  GkaInfoState<double> info{random_normal(8, 8, rng), random_normal(3, 8, rng)};
  info.H = (info.H * info.H.transpose() / 8.0).eval();
  const VectorXd q = random_normal(8, 1, rng);
  const VectorXd exact = gka_output<double>(info, q, 1.0);
  CHECK((gka_output<double>(info, q, 1.0, ChebyshevSolve{60}) - exact).norm() < 1e-6);
  CHECK((gka_output<double>(info, q, 1.0, ChebyshevSolve{60}) - exact).norm() <
        (gka_output<double>(info, q, 1.0, ChebyshevSolve{2}) - exact).norm());
}

TEST_CASE("Chebyshev rejects bad bounds") {
  auto apply = [](const VectorXd& z) -> VectorXd { return z; };
  CHECK_THROWS_AS(chebyshev_solve<double>(apply, 1.0, VectorXd::Ones(2).eval(), 3, SpectralBounds{0.0, 1.0}), RangeError);
  CHECK_THROWS_AS(chebyshev_solve<double>(apply, 1.0, VectorXd::Ones(2).eval(), 3, SpectralBounds{2.0, 1.0}), RangeError);
  CHECK_THROWS_AS(chebyshev_solve<double>(apply, 1.0, VectorXd::Ones(2).eval(), 0, SpectralBounds{1.0, 2.0}), RangeError);
}

TEST_CASE("GKA recurrence and information forms agree without decay") {
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    auto seq = random_sequence(8, 4, 3, rng);
    auto g = GateTrack<double>::constant(8, 1.0, 1.0, 0.8);
    for (auto& b : g.write) b = random_uniform(rng, 0.1, 1.0);
    CHECK(gka_recurrence_equivalence(seq, g) < 1e-9);
  }
}

TEST_CASE("GKA forms with zero writes both give zero outputs") {
  Rng rng(14);
  const auto seq = random_sequence(6, 3, 2, rng);
  const auto g = GateTrack<double>::constant(6, 1.0, 0.0, 1.0);
  CHECK(gka_recurrence_equivalence(seq, g) == 0.0);
  CHECK(ssm_forward(SsmKind::GKA, seq, g).outputs.isZero(0.0));
}

TEST_CASE("GKA forms agree at T=1 with the hand-evaluated gain") {
  Rng rng(15);
  const auto seq = random_sequence(1, 4, 2, rng);
  const double beta = 0.6, lambda = 0.9;
  const auto g = GateTrack<double>::constant(1, 1.0, beta, lambda);
  const VectorXd k = seq.keys.row(0).transpose(), q = seq.queries.row(0).transpose(), v = seq.values.row(0).transpose();
  const MatrixXd A = beta * k * k.transpose() + lambda * MatrixXd::Identity(4, 4);
  const VectorXd gain = beta * A.inverse() * k;
  const VectorXd expected = v * gain.dot(q);
  CHECK(gka_recurrence_equivalence(seq, g) < 1e-12);
  CHECK((ssm_forward(SsmKind::GKA, seq, g).outputs.row(0).transpose() - expected).norm() < 1e-12);
}

TEST_CASE("scalar mamba2 without decay probes to the causal all-ones matrix") {
  const Index T = 5;
  TokenSequence<double> frozen{MatrixXd::Ones(T, 1), MatrixXd::Ones(T, 1), MatrixXd::Zero(T, 1)};
  const MatrixXd io = ssm_io_matrix(SsmKind::Mamba2, frozen, GateTrack<double>::constant(T, 1.0, 1.0, 1.0));
  MatrixXd expected = MatrixXd::Zero(T, T);
  for (Index i = 0; i < T; ++i)
    for (Index j = 0; j <= i; ++j) expected(i, j) = 1.0;
  CHECK(io == expected);
}

TEST_CASE("probed io matrices are semiseparable of order d_k") {
  Rng rng(16);
  for (SsmKind kind : kAllSsmKinds) {
    const Index d_k = 2, T = 10;
    auto seq = random_sequence(T, d_k, 1, rng);
    seq.keys = normalize_rows(seq.keys);
    const auto g = default_gates(seq, 1.0, 3);
    const MatrixXd io = ssm_io_matrix(kind, seq, g);
    CHECK(hankel_profile(io, 1e-9).n_min <= d_k);
  }
}

TEST_CASE("gdn with zero writes matches mamba2 under pure decay") {
  // With beta = 0 the GDN state only decays; feeding beta = 0 to GDN and zero
  // values to mamba2 both give the zero-state response.
  Rng rng(17);
  const Index T = 6;
  auto seq = random_sequence(T, 3, 1, rng);
  auto g = GateTrack<double>::constant(T, 0.8, 0.0, 1.0);
  const MatrixXd gdn = ssm_io_matrix(SsmKind::GDN, seq, g);
  CHECK(gdn.isZero(0.0));
  TokenSequence<double> zero_values{seq.queries, seq.keys, MatrixXd::Zero(T, 1)};
  CHECK(ssm_forward(SsmKind::Mamba2, zero_values, g).outputs.isZero(0.0));
  // And from a nonzero initial state both kinds decay identically.
  SsmState<double> init{random_normal(1, 3, rng), MatrixXd()};
  const auto a = ssm_forward(SsmKind::GDN, zero_values, g, init);
  const auto b = ssm_forward(SsmKind::Mamba2, zero_values, g, init);
  CHECK((a.outputs - b.outputs).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("kind names round-trip") {
  for (SsmKind k : kAllSsmKinds) CHECK(parse_ssm_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_ssm_kind("lstm"), RangeError);
}
