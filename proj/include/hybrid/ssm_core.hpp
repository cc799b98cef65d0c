#pragma once

#include "hybrid/chebyshev.hpp"
#include "hybrid/mixing.hpp"

#include <algorithm>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace hybrid {

/// Recurrent layer families sharing S_t = S_{t-1} A_t + v_t B_t, y_t = S_t q_t.
enum class SsmKind { Mamba2, GDN, GKA };

inline std::string_view to_string(SsmKind kind) {
  switch (kind) {
    case SsmKind::Mamba2:
      return "mamba2";
    case SsmKind::GDN:
      return "gdn";
    case SsmKind::GKA:
      return "gka";
  }
  return "unknown";
}

inline SsmKind parse_ssm_kind(std::string_view name) {
  if (name == "mamba2") return SsmKind::Mamba2;
  if (name == "gdn") return SsmKind::GDN;
  if (name == "gka") return SsmKind::GKA;
  throw RangeError("unknown SSM kind: " + std::string(name));
}

inline constexpr SsmKind kAllSsmKinds[] = {SsmKind::Mamba2, SsmKind::GDN, SsmKind::GKA};

/// Gates of one step: decay gamma in (0,1], write strength beta in [0,1],
/// and the GKA ridge regulariser lambda > 0.
template <typename Scalar>
struct StepGates {
  Scalar decay{1};
  Scalar write{1};
  Scalar regularizer{1};
};

template <typename Scalar>
struct GateTrack {
  std::vector<Scalar> decay;
  std::vector<Scalar> write;
  std::vector<Scalar> regularizer;

  Index length() const { return static_cast<Index>(decay.size()); }

  StepGates<Scalar> at(Index t) const {
    return {decay[static_cast<std::size_t>(t)], write[static_cast<std::size_t>(t)],
            regularizer[static_cast<std::size_t>(t)]};
  }

  static GateTrack constant(Index length, Scalar decay, Scalar write, Scalar regularizer) {
    const auto n = static_cast<std::size_t>(length);
    return {std::vector<Scalar>(n, decay), std::vector<Scalar>(n, write),
            std::vector<Scalar>(n, regularizer)};
  }

  GateTrack slice(Index begin, Index count) const {
    auto cut = [&](const std::vector<Scalar>& v) {
      return std::vector<Scalar>(v.begin() + begin, v.begin() + begin + count);
    };
    return {cut(decay), cut(write), cut(regularizer)};
  }
};

template <typename Scalar>
void check_gates(const StepGates<Scalar>& g, SsmKind kind) {
  const double decay = value_of(g.decay), write = value_of(g.write);
  require(decay > 0.0 && decay <= 1.0, "decay gate must lie in (0, 1], got " + std::to_string(decay));
  require(write >= 0.0 && write <= 1.0, "write gate must lie in [0, 1], got " + std::to_string(write));
  if (kind == SsmKind::GKA)
    require(value_of(g.regularizer) > 0.0, "GKA regulariser lambda must be positive");
}

/// Information-form pair of GKA: H = sum beta k k^T (decayed), U = sum beta v k^T.
template <typename Scalar>
struct GkaInfoState {
  Matrix<Scalar> H;  // d_k x d_k, symmetric PSD
  Matrix<Scalar> U;  // d_v x d_k

  static GkaInfoState zero(Index key_dim, Index value_dim) {
    return {Matrix<Scalar>::Zero(key_dim, key_dim), Matrix<Scalar>::Zero(value_dim, key_dim)};
  }
};

/// Recurrent state. H is only carried by GKA in recurrence form, where it
/// accumulates the key statistics that shape the erase direction.
template <typename Scalar>
struct SsmState {
  Matrix<Scalar> S;  // d_v x d_k
  Matrix<Scalar> H;  // d_k x d_k (GKA), empty otherwise

  static SsmState zero(SsmKind kind, Index key_dim, Index value_dim) {
    SsmState s{Matrix<Scalar>::Zero(value_dim, key_dim), Matrix<Scalar>()};
    if (kind == SsmKind::GKA) s.H = Matrix<Scalar>::Zero(key_dim, key_dim);
    return s;
  }
};

/// H' = gamma H + beta k k^T,  U' = gamma U + beta v k^T.
template <typename Scalar>
GkaInfoState<Scalar> gka_info_update(const GkaInfoState<Scalar>& info, const Vector<Scalar>& k,
                                     const Vector<Scalar>& v, const Scalar& decay,
                                     const Scalar& write) {
  require(value_of(decay) >= 0.0 && value_of(decay) <= 1.0, "decay must lie in [0, 1]");
  require(value_of(write) >= 0.0 && value_of(write) <= 1.0, "write must lie in [0, 1]");
  require_shape(info.H.rows() == k.size() && info.U.cols() == k.size() && info.U.rows() == v.size(),
                "information state and key/value dimensions differ");
  GkaInfoState<Scalar> out;
  out.H = decay * info.H + write * (k * k.transpose());
  out.U = decay * info.U + write * (v * k.transpose());
  return out;
}

/// Regularised inverse H + lambda I applied to k, scaled by beta.
template <typename Scalar>
Vector<Scalar> gka_gain_from(const Matrix<Scalar>& H, const Vector<Scalar>& k, const Scalar& write,
                             const Scalar& regularizer) {
  require(value_of(regularizer) > 0.0, "lambda must be positive");
  require_shape(H.rows() == k.size() && H.cols() == k.size(), "H and k dimensions differ");
  Matrix<Scalar> A = H;
  A.diagonal().array() += regularizer;
  return write * A.ldlt().solve(k);
}

/// Erase direction g = beta (H + lambda I)^{-1} k. `info` must already include the current key.
template <typename Scalar>
Vector<Scalar> gka_gain(const GkaInfoState<Scalar>& info, const Vector<Scalar>& k,
                        const Scalar& write, const Scalar& regularizer) {
  return gka_gain_from(info.H, k, write, regularizer);
}

/// Incremental inverse Phi_t = (sum beta k k^T + lambda I)^{-1} by Sherman-Morrison.
/// Exact only without decay and with a constant lambda, so decay must be 1.
class ShermanMorrisonGain {
 public:
  ShermanMorrisonGain(Index key_dim, double regularizer) : regularizer_(regularizer) {
    require(regularizer > 0.0, "lambda must be positive");
    phi_ = MatrixXd::Identity(key_dim, key_dim) / regularizer;
  }

  /// Absorbs (k, beta) and returns g = beta Phi_t k.
  VectorXd update(const VectorXd& k, double write, double decay = 1.0) {
    require(decay == 1.0, "Sherman-Morrison gain is only exact for decay == 1");
    require_shape(k.size() == phi_.rows(), "key dimension mismatch");
    const VectorXd phik = phi_ * k;
    phi_ -= (write / (1.0 + write * k.dot(phik))) * (phik * phik.transpose());
    return write * (phi_ * k);
  }

  const MatrixXd& inverse() const { return phi_; }
  double regularizer() const { return regularizer_; }

 private:
  double regularizer_;
  MatrixXd phi_;
};

/// One recurrence step of the given kind.
///   Mamba2: S' = gamma S + v k^T
///   GDN:    S' = gamma S (I - beta k k^T) + beta v k^T
///   GKA:    H' = gamma H + beta k k^T, g = beta (H' + lambda I)^{-1} k,
///           S' = S (I - k g^T) + v g^T
template <typename Scalar>
SsmState<Scalar> ssm_step(SsmKind kind, const SsmState<Scalar>& state, const Vector<Scalar>& k,
                          const Vector<Scalar>& v, const StepGates<Scalar>& gates) {
  check_gates(gates, kind);
  require_shape(state.S.cols() == k.size() && state.S.rows() == v.size(),
                "state is " + std::to_string(state.S.rows()) + "x" + std::to_string(state.S.cols()) +
                    " but key/value have " + std::to_string(k.size()) + "/" +
                    std::to_string(v.size()) + " entries");
  SsmState<Scalar> next;
  switch (kind) {
    case SsmKind::Mamba2:
      next.S = gates.decay * state.S + v * k.transpose();
      break;
    case SsmKind::GDN: {
      const Vector<Scalar> Sk = state.S * k;
      next.S = gates.decay * (state.S - gates.write * (Sk * k.transpose())) +
               gates.write * (v * k.transpose());
      break;
    }
    case SsmKind::GKA: {
      require_shape(state.H.rows() == k.size(), "GKA state is missing its key statistics");
      next.H = gates.decay * state.H + gates.write * (k * k.transpose());
      const Vector<Scalar> g = gka_gain_from(next.H, k, gates.write, gates.regularizer);
      const Vector<Scalar> Sk = state.S * k;
      next.S = state.S + (v - Sk) * g.transpose();
      break;
    }
  }
  return next;
}

/// Transition operator A_t for kinds whose A_t depends only on the current step.
template <typename Scalar>
Matrix<Scalar> step_transition(SsmKind kind, const Vector<Scalar>& k, const StepGates<Scalar>& gates) {
  const Index d = k.size();
  switch (kind) {
    case SsmKind::Mamba2:
      return gates.decay * Matrix<Scalar>::Identity(d, d);
    case SsmKind::GDN:
      return gates.decay *
             (Matrix<Scalar>::Identity(d, d) - gates.write * (k * k.transpose()));
    case SsmKind::GKA:
      break;
  }
  throw RangeError("GKA transitions depend on the whole key history");
}

template <typename Scalar>
struct SsmForward {
  Matrix<Scalar> outputs;  // T x d_v, y_t = S_t q_t
  SsmState<Scalar> final_state;
};

/// Sequential reference forward over a whole sequence.
template <typename Scalar>
SsmForward<Scalar> ssm_forward(SsmKind kind, const TokenSequence<Scalar>& seq,
                               const GateTrack<Scalar>& gates, SsmState<Scalar> state) {
  check_sequence(seq);
  require_shape(gates.length() == seq.length(), "gate track and sequence lengths differ");
  SsmForward<Scalar> out;
  out.outputs.resize(seq.length(), seq.value_dim());
  for (Index t = 0; t < seq.length(); ++t) {
    const Vector<Scalar> k = seq.keys.row(t).transpose();
    const Vector<Scalar> v = seq.values.row(t).transpose();
    state = ssm_step(kind, state, k, v, gates.at(t));
    out.outputs.row(t) = (state.S * seq.queries.row(t).transpose()).transpose();
  }
  out.final_state = std::move(state);
  return out;
}

template <typename Scalar>
SsmForward<Scalar> ssm_forward(SsmKind kind, const TokenSequence<Scalar>& seq,
                               const GateTrack<Scalar>& gates) {
  return ssm_forward(kind, seq, gates,
                     SsmState<Scalar>::zero(kind, seq.key_dim(), seq.value_dim()));
}

struct ExactSolve {};
struct ChebyshevSolve {
  int iterations = 30;
};
using OutputSolver = std::variant<ExactSolve, ChebyshevSolve>;

/// Default interval [lambda, lambda + ||H||_F] for H + lambda I with H PSD.
template <typename Scalar>
SpectralBounds default_spectral_bounds(const Matrix<Scalar>& H, const Scalar& regularizer) {
  const double lambda = value_of(regularizer);
  return {lambda, lambda + value_of(H.norm())};
}

/// y = U (H + lambda I)^{-1} q, by a dense solve or by Chebyshev iteration.
template <typename Scalar>
Vector<Scalar> gka_output(const GkaInfoState<Scalar>& info, const Vector<Scalar>& q,
                          const Scalar& regularizer, const OutputSolver& solver = ExactSolve{}) {
  require(value_of(regularizer) > 0.0, "lambda must be positive");
  require_shape(info.H.rows() == q.size(), "query dimension mismatch");
  Vector<Scalar> x;
  if (std::holds_alternative<ExactSolve>(solver)) {
    Matrix<Scalar> A = info.H;
    A.diagonal().array() += regularizer;
    x = A.ldlt().solve(q);
  } else {
    const int r = std::get<ChebyshevSolve>(solver).iterations;
    auto apply_h = [&](const Vector<Scalar>& z) -> Vector<Scalar> { return info.H * z; };
    x = chebyshev_solve(apply_h, regularizer, q, r, default_spectral_bounds(info.H, regularizer))
            .solution;
  }
  return info.U * x;
}

template <typename Scalar>
struct GkaInfoForward {
  Matrix<Scalar> outputs;
  GkaInfoState<Scalar> final_state;
};

/// GKA forward in information form: additive (H, U) updates plus a per-step solve.
template <typename Scalar>
GkaInfoForward<Scalar> gka_info_forward(const TokenSequence<Scalar>& seq,
                                        const GateTrack<Scalar>& gates,
                                        const OutputSolver& solver = ExactSolve{}) {
  check_sequence(seq);
  require_shape(gates.length() == seq.length(), "gate track and sequence lengths differ");
  GkaInfoForward<Scalar> out;
  out.outputs.resize(seq.length(), seq.value_dim());
  auto info = GkaInfoState<Scalar>::zero(seq.key_dim(), seq.value_dim());
  for (Index t = 0; t < seq.length(); ++t) {
    const auto g = gates.at(t);
    info = gka_info_update<Scalar>(info, seq.keys.row(t).transpose(), seq.values.row(t).transpose(),
                                   g.decay, g.write);
    out.outputs.row(t) =
        gka_output<Scalar>(info, seq.queries.row(t).transpose(), g.regularizer, solver).transpose();
  }
  out.final_state = std::move(info);
  return out;
}

/// Largest output difference between the GKA recurrence and its information form.
inline double gka_recurrence_equivalence(const TokenSequence<double>& seq,
                                         const GateTrack<double>& gates,
                                         const OutputSolver& solver = ExactSolve{}) {
  const auto recurrent = ssm_forward(SsmKind::GKA, seq, gates);
  const auto info = gka_info_forward(seq, gates, solver);
  return (recurrent.outputs - info.outputs).cwiseAbs().maxCoeff();
}

/// T x T input-output matrix of a layer with frozen keys, queries and gates,
/// probed with unit value impulses e_j (d_v = 1).
inline MatrixXd ssm_io_matrix(SsmKind kind, const TokenSequence<double>& frozen,
                              const GateTrack<double>& gates) {
  const Index T = frozen.length();
  MatrixXd io(T, T);
  TokenSequence<double> probe{frozen.queries, frozen.keys, MatrixXd::Zero(T, 1)};
  for (Index j = 0; j < T; ++j) {
    probe.values.setZero();
    probe.values(j, 0) = 1.0;
    io.col(j) = ssm_forward(kind, probe, gates).outputs.col(0);
  }
  return io;
}

/// Gates from a seeded random linear projection of [k_t; v_t] through a sigmoid.
/// lambda is constant.
inline GateTrack<double> default_gates(const TokenSequence<double>& seq, double regularizer = 1.0,
                                       std::uint64_t seed = kDefaultSeed) {
  Rng rng(seed);
  const Index width = seq.key_dim() + seq.value_dim();
  const VectorXd decay_proj = random_normal(width, 1, rng, 1.0 / std::sqrt(double(width)));
  const VectorXd write_proj = random_normal(width, 1, rng, 1.0 / std::sqrt(double(width)));
  GateTrack<double> gates;
  for (Index t = 0; t < seq.length(); ++t) {
    VectorXd x(width);
    x << seq.keys.row(t).transpose(), seq.values.row(t).transpose();
    // Bias 3 keeps decay near 0.95 so the memory actually spans the sequence.
    gates.decay.push_back(sigmoid(decay_proj.dot(x) + 3.0));
    gates.write.push_back(sigmoid(write_proj.dot(x)));
    gates.regularizer.push_back(regularizer);
  }
  return gates;
}

/// Keys scaled to unit norm; GDN's erase is contractive only for ||k|| <= 1.
template <typename Scalar>
Matrix<Scalar> normalize_rows(const Matrix<Scalar>& m) {
  Matrix<Scalar> out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const Scalar norm = m.row(i).norm();
    if (value_of(norm) > 0.0) out.row(i) /= norm;
  }
  return out;
}

}  // namespace hybrid
