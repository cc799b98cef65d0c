#pragma once

#include "hybrid/ssm_core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace hybrid {

/// Minimal decoder stack: single-head sequence mixer + residual, then a
/// tanh MLP + residual, repeated. Templated so that gradients can be taken
/// with forward-mode autodiff scalars.

enum class MixerType { Attention, Ssm };
enum class FinalNorm { None, Rms };

/// Source tag of a cached token: the shared prefix, a chunk index >= 0, or a query.
inline constexpr int kPrefixSource = -1;
inline constexpr int kQuerySource = -2;

template <typename Scalar>
struct ToyLayer {
  MixerType mixer = MixerType::Attention;
  SsmKind ssm_kind = SsmKind::Mamba2;
  Index window = 0;  // attention only; 0 means full causal context

  Matrix<Scalar> Wq, Wk, Wv;  // d_head x d_model
  Matrix<Scalar> Wo;          // d_model x d_head
  Matrix<Scalar> Wg;          // d_head x d_model, SSM output gate

  // SSM gates: decay = sigmoid(decay_proj x + decay_bias), same for write.
  RowVector<Scalar> decay_proj, write_proj;
  Scalar decay_bias{3};
  Scalar write_bias{0};
  Scalar regularizer{1};

  Matrix<Scalar> W1;  // d_ff x d_model
  Matrix<Scalar> W2;  // d_model x d_ff
};

template <typename Scalar>
struct ToyStack {
  Index d_model = 0;
  Index d_head = 0;
  FinalNorm final_norm = FinalNorm::Rms;
  std::vector<ToyLayer<Scalar>> layers;

  Index depth() const { return static_cast<Index>(layers.size()); }
};

/// Per-layer decoding cache. Attention layers fill the KV part, SSM layers the
/// state part. For GKA, S holds U and H the key statistics.
template <typename Scalar>
struct LayerCache {
  Matrix<Scalar> keys;    // entries x d_head
  Matrix<Scalar> values;  // entries x d_head
  std::vector<Index> positions;
  std::vector<int> sources;

  Matrix<Scalar> S;
  Matrix<Scalar> H;
  Matrix<Scalar> transition;  // accumulated A over every absorbed token

  Index entries() const { return keys.rows(); }
};

template <typename Scalar>
LayerCache<Scalar> empty_cache(const ToyStack<Scalar>& stack, const ToyLayer<Scalar>& layer) {
  const Index d = stack.d_head;
  LayerCache<Scalar> c;
  c.keys.resize(0, d);
  c.values.resize(0, d);
  if (layer.mixer == MixerType::Ssm) {
    c.S = Matrix<Scalar>::Zero(d, d);
    if (layer.ssm_kind == SsmKind::GKA) c.H = Matrix<Scalar>::Zero(d, d);
    c.transition = Matrix<Scalar>::Identity(d, d);
  }
  return c;
}

template <typename Scalar>
struct StackTrace {
  std::vector<Matrix<Scalar>> hidden;  // X_0 (embedded input) .. X_L, each T x d_model
  Matrix<Scalar> final_normed;
  std::vector<LayerCache<Scalar>> caches;
};

struct RunOptions {
  std::vector<Index> positions;  // empty: 0..T-1
  std::vector<bool> active;      // empty: every token active; inactive tokens write nothing
  std::vector<int> sources;      // empty: every token tagged `source`
  int source = 0;
};

inline MatrixXd positional_encoding(const std::vector<Index>& positions, Index d_model) {
  MatrixXd P(static_cast<Index>(positions.size()), d_model);
  for (Index t = 0; t < P.rows(); ++t) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(t)]);
    for (Index i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / double(d_model));
      P(t, i) = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return P;
}

template <typename Scalar>
Matrix<Scalar> rms_normalize(const Matrix<Scalar>& X) {
  using std::sqrt;
  Matrix<Scalar> out = X;
  for (Index t = 0; t < X.rows(); ++t) {
    const Scalar ms = X.row(t).squaredNorm() / Scalar(double(X.cols()));
    out.row(t) /= sqrt(ms + Scalar(1e-6));
  }
  return out;
}

namespace detail {

template <typename Scalar>
Vector<Scalar> unit(const Vector<Scalar>& x) {
  const Scalar n = x.norm();
  return value_of(n) > 0.0 ? Vector<Scalar>(x / n) : x;
}

template <typename Scalar>
Vector<Scalar> attention_step(const ToyStack<Scalar>& stack, const ToyLayer<Scalar>& layer,
                              LayerCache<Scalar>& cache, const Vector<Scalar>& x, Index position,
                              bool active, int source) {
  using std::exp;
  const Vector<Scalar> q = layer.Wq * x;
  if (active) {
    const Index e = cache.entries();
    cache.keys.conservativeResize(e + 1, Eigen::NoChange);
    cache.values.conservativeResize(e + 1, Eigen::NoChange);
    cache.keys.row(e) = (layer.Wk * x).transpose();
    cache.values.row(e) = (layer.Wv * x).transpose();
    cache.positions.push_back(position);
    cache.sources.push_back(source);
  }
  const Scalar scale(1.0 / std::sqrt(double(stack.d_head)));
  std::vector<Index> visible;
  for (Index e = 0; e < cache.entries(); ++e) {
    const Index p = cache.positions[static_cast<std::size_t>(e)];
    if (p > position) continue;
    if (layer.window > 0 && p <= position - layer.window) continue;
    visible.push_back(e);
  }
  Vector<Scalar> out = Vector<Scalar>::Zero(stack.d_head);
  if (visible.empty()) return out;
  std::vector<Scalar> w;
  double peak = -std::numeric_limits<double>::infinity();
  for (Index e : visible) {
    w.push_back(scale * cache.keys.row(e).dot(q.transpose()));
    peak = std::max(peak, value_of(w.back()));
  }
  Scalar total(0);
  for (auto& s : w) {
    s = exp(s - Scalar(peak));
    total += s;
  }
  for (std::size_t i = 0; i < visible.size(); ++i)
    out += (w[i] / total) * cache.values.row(visible[i]).transpose();
  return out;
}

template <typename Scalar>
Vector<Scalar> ssm_layer_step(const ToyLayer<Scalar>& layer, LayerCache<Scalar>& cache,
                              const Vector<Scalar>& x, bool active) {
  const Vector<Scalar> q = unit<Scalar>(layer.Wq * x);
  const Vector<Scalar> k = unit<Scalar>(layer.Wk * x);
  Vector<Scalar> v = layer.Wv * x;
  StepGates<Scalar> g{sigmoid<Scalar>(layer.decay_proj.dot(x.transpose()) + layer.decay_bias),
                      sigmoid<Scalar>(layer.write_proj.dot(x.transpose()) + layer.write_bias),
                      layer.regularizer};
  if (!active) {
    g.decay = Scalar(1);
    g.write = Scalar(0);
    v.setZero();
  }
  Vector<Scalar> y;
  if (layer.ssm_kind == SsmKind::GKA) {
    GkaInfoState<Scalar> info{cache.H, cache.S};
    info = gka_info_update<Scalar>(info, k, v, g.decay, g.write);
    y = gka_output<Scalar>(info, q, g.regularizer);
    cache.H = std::move(info.H);
    cache.S = std::move(info.U);
    cache.transition *= g.decay;
  } else {
    SsmState<Scalar> state{cache.S, Matrix<Scalar>()};
    cache.S = ssm_step(layer.ssm_kind, state, k, v, g).S;
    cache.transition = cache.transition * step_transition(layer.ssm_kind, k, g);
    y = cache.S * q;
  }
  const Vector<Scalar> gate_pre = layer.Wg * x;
  for (Index i = 0; i < y.size(); ++i) y(i) *= sigmoid<Scalar>(gate_pre(i));
  return y;
}

}  // namespace detail

/// Runs the stack over T tokens (rows of `inputs`), continuing from `initial`
/// caches when given. X_0 is the input plus a sinusoidal position code.
template <typename Scalar>
StackTrace<Scalar> run_stack(const ToyStack<Scalar>& stack, const Matrix<Scalar>& inputs,
                             const RunOptions& options = {},
                             const std::vector<LayerCache<Scalar>>* initial = nullptr) {
  using std::tanh;
  const Index T = inputs.rows();
  require_shape(inputs.cols() == stack.d_model, "input width differs from d_model");
  std::vector<Index> positions = options.positions;
  if (positions.empty())
    for (Index t = 0; t < T; ++t) positions.push_back(t);
  require_shape(static_cast<Index>(positions.size()) == T, "one position per token is required");
  require_shape(options.active.empty() || static_cast<Index>(options.active.size()) == T,
                "active mask must have one flag per token");
  require_shape(options.sources.empty() || static_cast<Index>(options.sources.size()) == T,
                "source tags must have one entry per token");

  StackTrace<Scalar> trace;
  if (initial) {
    require_shape(static_cast<Index>(initial->size()) == stack.depth(), "one cache per layer required");
    trace.caches = *initial;
  } else {
    for (const auto& layer : stack.layers) trace.caches.push_back(empty_cache(stack, layer));
  }
  Matrix<Scalar> X = inputs + positional_encoding(positions, stack.d_model).template cast<Scalar>();
  trace.hidden.push_back(X);
  for (Index l = 0; l < stack.depth(); ++l) {
    const auto& layer = stack.layers[static_cast<std::size_t>(l)];
    auto& cache = trace.caches[static_cast<std::size_t>(l)];
    Matrix<Scalar> next(T, stack.d_model);
    for (Index t = 0; t < T; ++t) {
      const bool active = options.active.empty() || options.active[static_cast<std::size_t>(t)];
      const Vector<Scalar> x = X.row(t).transpose();
      const Vector<Scalar> mixed =
          layer.mixer == MixerType::Attention
              ? detail::attention_step(stack, layer, cache, x, positions[static_cast<std::size_t>(t)],
                                       active,
                                       options.sources.empty() ? options.source
                                                               : options.sources[static_cast<std::size_t>(t)])
              : detail::ssm_layer_step(layer, cache, x, active);
      const Vector<Scalar> h = x + layer.Wo * mixed;
      Vector<Scalar> a = layer.W1 * h;
      for (Index i = 0; i < a.size(); ++i) a(i) = tanh(a(i));
      next.row(t) = (h + layer.W2 * a).transpose();
    }
    if (!all_finite(next))
      throw NumericalError("toy stack produced non-finite values at layer " + std::to_string(l));
    X = std::move(next);
    trace.hidden.push_back(X);
  }
  trace.final_normed = stack.final_norm == FinalNorm::Rms ? rms_normalize<Scalar>(X) : X;
  return trace;
}

template <typename To, typename From>
ToyStack<To> cast_stack(const ToyStack<From>& s) {
  ToyStack<To> out;
  out.d_model = s.d_model;
  out.d_head = s.d_head;
  out.final_norm = s.final_norm;
  for (const auto& l : s.layers) {
    ToyLayer<To> c;
    c.mixer = l.mixer;
    c.ssm_kind = l.ssm_kind;
    c.window = l.window;
    auto m = [](const auto& x) { return x.unaryExpr([](const From& v) { return To(value_of(v)); }).eval(); };
    c.Wq = m(l.Wq);
    c.Wk = m(l.Wk);
    c.Wv = m(l.Wv);
    c.Wo = m(l.Wo);
    c.Wg = m(l.Wg);
    c.decay_proj = m(l.decay_proj);
    c.write_proj = m(l.write_proj);
    c.decay_bias = To(value_of(l.decay_bias));
    c.write_bias = To(value_of(l.write_bias));
    c.regularizer = To(value_of(l.regularizer));
    c.W1 = m(l.W1);
    c.W2 = m(l.W2);
    out.layers.push_back(std::move(c));
  }
  return out;
}

/// Random attention-only stack with weights scaled by 1/sqrt(fan_in).
inline ToyStack<double> random_attention_stack(Index depth, Index d_model, Index d_head, Index d_ff,
                                               Rng& rng) {
  require(depth >= 1 && d_model >= 1 && d_head >= 1 && d_ff >= 1, "stack sizes must be positive");
  ToyStack<double> s;
  s.d_model = d_model;
  s.d_head = d_head;
  const double in = 1.0 / std::sqrt(double(d_model));
  for (Index l = 0; l < depth; ++l) {
    ToyLayer<double> layer;
    layer.Wq = random_normal(d_head, d_model, rng, in);
    layer.Wk = random_normal(d_head, d_model, rng, in);
    layer.Wv = random_normal(d_head, d_model, rng, in);
    layer.Wo = random_normal(d_model, d_head, rng, 1.0 / std::sqrt(double(d_head)));
    layer.Wg = MatrixXd::Zero(d_head, d_model);
    layer.decay_proj = RowVectorXd::Zero(d_model);
    layer.write_proj = RowVectorXd::Zero(d_model);
    layer.W1 = random_normal(d_ff, d_model, rng, in);
    layer.W2 = random_normal(d_model, d_ff, rng, 0.5 / std::sqrt(double(d_ff)));
    s.layers.push_back(std::move(layer));
  }
  return s;
}

}  // namespace hybrid
