#include "hybrid/priming.hpp"

#include <unsupported/Eigen/AutoDiff>
#include <unsupported/Eigen/KroneckerProduct>

#include <algorithm>
#include <numeric>

namespace hybrid {

namespace {

using AD = Eigen::AutoDiffScalar<VectorXd>;

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

void check_attention_weights(const AttentionWeights& w) {
  require(w.num_q_heads >= 1 && w.num_kv_heads >= 1 && w.head_dim >= 1,
          "head counts and head_dim must be positive");
  require(w.num_q_heads % w.num_kv_heads == 0,
          "H_Q = " + std::to_string(w.num_q_heads) + " is not divisible by H_KV = " +
              std::to_string(w.num_kv_heads));
  const Index d = w.d_model();
  const Index q = w.num_q_heads * w.head_dim, kv = w.num_kv_heads * w.head_dim;
  require_shape(w.W_Q.rows() == q, "W_Q must have H_Q * d_head rows");
  require_shape(w.W_K.rows() == kv && w.W_K.cols() == d, "W_K must be (H_KV d_head) x d_model");
  require_shape(w.W_V.rows() == kv && w.W_V.cols() == d, "W_V must be (H_KV d_head) x d_model");
  require_shape(w.W_O.rows() == d && w.W_O.cols() == q, "W_O must be d_model x (H_Q d_head)");
  require_shape(w.q_norm.size() == 0 || w.q_norm.size() == w.head_dim, "q_norm must have d_head entries");
  require_shape(w.k_norm.size() == 0 || w.k_norm.size() == w.head_dim, "k_norm must have d_head entries");
}

AttentionWeights random_attention_weights(Index d_model, Index num_q_heads, Index num_kv_heads,
                                          Index head_dim, Rng& rng, bool qk_norm) {
  AttentionWeights w;
  w.num_q_heads = num_q_heads;
  w.num_kv_heads = num_kv_heads;
  w.head_dim = head_dim;
  const double s = 1.0 / std::sqrt(double(d_model));
  w.W_Q = random_normal(num_q_heads * head_dim, d_model, rng, s);
  w.W_K = random_normal(num_kv_heads * head_dim, d_model, rng, s);
  w.W_V = random_normal(num_kv_heads * head_dim, d_model, rng, s);
  w.W_O = random_normal(d_model, num_q_heads * head_dim, rng, s);
  if (qk_norm) {
    w.q_norm = VectorXd::Ones(head_dim) + random_normal(head_dim, 1, rng, 0.1);
    w.k_norm = VectorXd::Ones(head_dim) + random_normal(head_dim, 1, rng, 0.1);
  }
  check_attention_weights(w);
  return w;
}

MatrixXd repeat_interleave_heads(const MatrixXd& W, Index m, Index head_dim) {
  require(m >= 1, "expansion factor must be >= 1");
  require(head_dim >= 1 && W.rows() % head_dim == 0,
          "row count " + std::to_string(W.rows()) + " is not a multiple of head_dim " +
              std::to_string(head_dim));
  const Index heads = W.rows() / head_dim;
  MatrixXd out(heads * m * head_dim, W.cols());
  for (Index h = 0; h < heads; ++h)
    for (Index r = 0; r < m; ++r)
      out.middleRows((h * m + r) * head_dim, head_dim) = W.middleRows(h * head_dim, head_dim);
  return out;
}

MatrixXd gate_init(const MatrixXd& W_O, const MatrixXd& W_V, Index m, Index head_dim) {
  const MatrixXd expanded = repeat_interleave_heads(W_V, m, head_dim);
  require_shape(expanded.rows() == W_O.cols() && expanded.cols() == W_O.rows(),
                "repeat_interleave(W_V, " + std::to_string(m) + ") is " +
                    std::to_string(expanded.rows()) + "x" + std::to_string(expanded.cols()) +
                    " but W_O^T is " + std::to_string(W_O.cols()) + "x" + std::to_string(W_O.rows()));
  return 0.5 * (W_O.transpose() + expanded);
}

SsmLayerWeights transfer_weights(const AttentionWeights& src, SsmKind kind, std::uint64_t seed) {
  check_attention_weights(src);
  SsmLayerWeights out;
  out.kind = kind;
  out.num_q_heads = src.num_q_heads;
  out.num_kv_heads = src.num_kv_heads;
  out.head_dim = src.head_dim;
  out.kv_expansion = src.group_size();
  out.W_Q = src.W_Q;
  out.W_K = src.W_K;
  out.W_V = src.W_V;
  out.W_O = src.W_O;
  out.q_norm = src.q_norm;
  out.k_norm = src.k_norm;
  out.W_G = gate_init(src.W_O, src.W_V, src.group_size(), src.head_dim);

  Rng rng(seed);
  const Index d = src.d_model();
  const double s = 1.0 / std::sqrt(double(d));
  out.decay_proj = random_normal(src.num_q_heads, d, rng, s);
  out.write_proj = random_normal(src.num_q_heads, d, rng, s);
  out.decay_bias = VectorXd::Constant(src.num_q_heads, 3.0) + random_normal(src.num_q_heads, 1, rng, 0.5);
  out.write_bias = random_normal(src.num_q_heads, 1, rng, 0.5);
  out.conv = random_normal(kDefaultConvWidth, 2 * src.num_kv_heads * src.head_dim, rng,
                           1.0 / std::sqrt(double(kDefaultConvWidth)));
  if (kind == SsmKind::GKA) {
    out.regularizer = VectorXd(src.num_q_heads);
    for (Index h = 0; h < src.num_q_heads; ++h) out.regularizer(h) = std::exp(random_uniform(rng, -2.0, 0.0));
  }
  return out;
}

AgqaParams agqa_init(Index num_q_heads, Index num_kv_heads, Index head_dim, Index rank,
                     std::uint64_t seed) {
  require(num_q_heads >= 1 && num_kv_heads >= 1 && head_dim >= 1 && rank >= 1,
          "AGQA sizes must be positive");
  require(num_q_heads % num_kv_heads == 0, "H_Q must be divisible by H_KV");
  AgqaParams p;
  p.num_q_heads = num_q_heads;
  p.num_kv_heads = num_kv_heads;
  p.head_dim = head_dim;
  Rng rng(seed);
  p.W1 = random_normal(rank, num_kv_heads * head_dim, rng, 1.0 / std::sqrt(double(num_kv_heads * head_dim)));
  p.W2 = MatrixXd::Zero(num_q_heads * head_dim, rank);
  const Index m = num_q_heads / num_kv_heads;
  p.R = Eigen::kroneckerProduct(MatrixXd::Identity(num_kv_heads, num_kv_heads), MatrixXd::Ones(m, 1));
  return p;
}

MatrixXd agqa_forward(const AgqaParams& p, const MatrixXd& X) {
  const Index kv = p.num_kv_heads * p.head_dim, q = p.num_q_heads * p.head_dim;
  require_shape(X.rows() == p.num_kv_heads && X.cols() == p.head_dim, "X must be H_KV x d_head");
  require_shape(p.W1.cols() == kv && p.W2.rows() == q && p.W2.cols() == p.W1.rows(),
                "AGQA projections have inconsistent shapes");
  require_shape(p.R.rows() == p.num_q_heads && p.R.cols() == p.num_kv_heads, "R must be H_Q x H_KV");
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> Xr = X;
  const VectorXd flat = Eigen::Map<const VectorXd>(Xr.data(), kv);
  const VectorXd hidden = (p.W1 * flat).unaryExpr(&silu);
  const VectorXd low_rank = p.W2 * hidden;
  const MatrixXd expanded = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      low_rank.data(), p.num_q_heads, p.head_dim);
  return expanded + p.R * X;
}

MatrixXd gqa_replicate(const MatrixXd& X, Index m) { return repeat_interleave_heads(X, m, 1); }

ImportanceTable importance_scores(const LayerEvaluator& evaluator, Index layers, Index window) {
  require(layers >= 1, "need at least one layer");
  require(window >= 1, "window must be >= 1");
  auto mean_score = [&](std::optional<Index> swapped) {
    std::vector<double> scores;
    try {
      scores = evaluator(swapped, window);
    } catch (const std::exception& e) {
      const std::string where = swapped ? "layer " + std::to_string(*swapped) : "baseline";
      throw Error("evaluator failed for " + where + ": " + e.what());
    }
    require(!scores.empty(), "evaluator returned no task scores");
    for (double s : scores)
      require(std::isfinite(s) && s >= 0.0 && s <= 1.0, "evaluator scores must lie in [0, 1]");
    return std::accumulate(scores.begin(), scores.end(), 0.0) / double(scores.size());
  };
  ImportanceTable table;
  table.baseline = mean_score(std::nullopt);
  for (Index i = 0; i < layers; ++i) {
    table.scores.push_back(mean_score(i));
    table.importance.push_back(table.baseline - table.scores.back());
  }
  return table;
}

std::vector<Index> select_layers(const ImportanceTable& table, Index M) {
  require(M >= 0 && M <= table.layers(),
          "cannot select " + std::to_string(M) + " of " + std::to_string(table.layers()) + " layers");
  std::vector<Index> order(static_cast<std::size_t>(table.layers()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return table.importance[static_cast<std::size_t>(a)] < table.importance[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(M));
  std::sort(order.begin(), order.end());
  return order;
}

RecallEvaluator::RecallEvaluator(const RecallTaskConfig& config) : config_(config) {
  require(config.length >= 2 && config.vocab >= 2 && config.samples >= 1,
          "recall task needs length >= 2, vocab >= 2 and samples >= 1");
  Rng rng(config.seed);
  std::uniform_int_distribution<Index> token(0, config.vocab - 1);
  for (Index s = 0; s < config.samples; ++s) {
    std::vector<Index> seq;
    for (Index t = 0; t < config.length; ++t) seq.push_back(token(rng));
    sequences_.push_back(std::move(seq));
  }
}

std::vector<double> RecallEvaluator::operator()(std::optional<Index> swapped_layer, Index window) const {
  if (swapped_layer) require(*swapped_layer >= 0 && *swapped_layer < layers(), "layer index out of range");
  const Index T = config_.length, V = config_.vocab;
  // Layer l attends from t to target(l, t) through scaled one-hot position codes.
  auto target = [](Index layer, Index t) -> Index {
    switch (layer) {
      case 0:
        return t;
      case 1:
        return std::max<Index>(t - 1, 0);
      default:
        return 0;
    }
  };
  std::vector<MatrixXd> mixers;
  for (Index l = 0; l < layers(); ++l) {
    TokenSequence<double> codes{MatrixXd::Zero(T, T), MatrixXd::Identity(T, T), MatrixXd::Zero(T, 1)};
    for (Index t = 0; t < T; ++t) codes.queries(t, target(l, t)) = config_.sharpness;
    const bool swapped = swapped_layer && *swapped_layer == l;
    mixers.push_back(swapped ? build_swa_mixer(codes, window) : build_attention_mixer(codes));
  }
  std::vector<double> accuracy(static_cast<std::size_t>(layers()), 0.0);
  for (const auto& seq : sequences_) {
    MatrixXd content = MatrixXd::Zero(T, V);
    for (Index t = 0; t < T; ++t) content(t, seq[static_cast<std::size_t>(t)]) = 1.0;
    for (Index l = 0; l < layers(); ++l) {
      // Each layer writes into its own residual slot; the probe reads that slot.
      const MatrixXd slot = mixers[static_cast<std::size_t>(l)] * content;
      Index correct = 0;
      for (Index t = 0; t < T; ++t) {
        Index guess = 0;
        slot.row(t).maxCoeff(&guess);
        if (guess == seq[static_cast<std::size_t>(target(l, t))]) ++correct;
      }
      accuracy[static_cast<std::size_t>(l)] += double(correct) / double(T);
    }
  }
  for (auto& a : accuracy) a /= double(config_.samples);
  return accuracy;
}

std::string_view to_string(AlignmentMode m) { return m == AlignmentMode::EndToEnd ? "e2e" : "layerwise"; }

AlignmentMode parse_alignment_mode(std::string_view name) {
  if (name == "e2e") return AlignmentMode::EndToEnd;
  if (name == "layerwise") return AlignmentMode::Layerwise;
  throw RangeError("unknown alignment mode: " + std::string(name));
}

ToyStack<double> prime_hybrid(const ToyStack<double>& teacher, const std::vector<Index>& ssm_layers,
                              SsmKind kind, std::uint64_t seed) {
  ToyStack<double> hybrid = teacher;
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(double(teacher.d_model));
  for (Index i : ssm_layers) {
    require(i >= 0 && i < teacher.depth(), "SSM layer index " + std::to_string(i) + " out of range");
    auto& layer = hybrid.layers[static_cast<std::size_t>(i)];
    require(layer.mixer == MixerType::Attention, "layer " + std::to_string(i) + " is already an SSM");
    layer.mixer = MixerType::Ssm;
    layer.ssm_kind = kind;
    layer.window = 0;
    layer.Wg = gate_init(layer.Wo, layer.Wv, 1, teacher.d_head);
    layer.decay_proj = random_normal(1, teacher.d_model, rng, s);
    layer.write_proj = random_normal(1, teacher.d_model, rng, s);
    layer.decay_bias = 3.0 + random_normal(1, 1, rng, 0.5)(0, 0);
    layer.write_bias = random_normal(1, 1, rng, 0.5)(0, 0);
    layer.regularizer = 1.0;
  }
  return hybrid;
}

VectorXd gate_parameters(const ToyLayer<double>& layer) {
  require(layer.mixer == MixerType::Ssm, "gate parameters exist only on SSM layers");
  const Index d = layer.decay_proj.size();
  VectorXd theta(2 + 2 * d);
  theta << layer.decay_bias, layer.write_bias, layer.decay_proj.transpose(), layer.write_proj.transpose();
  return theta;
}

void set_gate_parameters(ToyLayer<double>& layer, const VectorXd& theta) {
  const Index d = layer.decay_proj.size();
  require_shape(theta.size() == 2 + 2 * d, "gate parameter vector has the wrong length");
  layer.decay_bias = theta(0);
  layer.write_bias = theta(1);
  layer.decay_proj = theta.segment(2, d).transpose();
  layer.write_proj = theta.segment(2 + d, d).transpose();
}

VectorXd stack_gate_parameters(const ToyStack<double>& hybrid) {
  std::vector<VectorXd> parts;
  Index total = 0;
  for (const auto& layer : hybrid.layers)
    if (layer.mixer == MixerType::Ssm) {
      parts.push_back(gate_parameters(layer));
      total += parts.back().size();
    }
  VectorXd theta(total);
  Index at = 0;
  for (const auto& p : parts) {
    theta.segment(at, p.size()) = p;
    at += p.size();
  }
  return theta;
}

void set_stack_gate_parameters(ToyStack<double>& hybrid, const VectorXd& theta) {
  Index at = 0;
  for (auto& layer : hybrid.layers)
    if (layer.mixer == MixerType::Ssm) {
      const Index n = 2 + 2 * layer.decay_proj.size();
      require_shape(at + n <= theta.size(), "gate parameter vector is too short");
      set_gate_parameters(layer, theta.segment(at, n));
      at += n;
    }
  require_shape(at == theta.size(), "gate parameter vector is too long");
}

double alignment_loss_value(AlignmentMode mode, const ToyStack<double>& hybrid,
                            const ToyStack<double>& teacher, const MatrixXd& inputs) {
  return alignment_loss(mode, run_stack(hybrid, inputs), run_stack(teacher, inputs));
}

LossGradient alignment_gradient(AlignmentMode mode, const ToyStack<double>& hybrid,
                                const ToyStack<double>& teacher, const MatrixXd& inputs) {
  const VectorXd theta = stack_gate_parameters(hybrid);
  const Index P = theta.size();
  require(P > 0, "the hybrid has no SSM layers to differentiate");
  ToyStack<AD> h = cast_stack<AD>(hybrid);
  Index at = 0;
  auto seed_var = [&](AD& x) { x = AD(value_of(x), P, at++); };
  for (auto& layer : h.layers) {
    if (layer.mixer != MixerType::Ssm) continue;
    seed_var(layer.decay_bias);
    seed_var(layer.write_bias);
    for (Index i = 0; i < layer.decay_proj.size(); ++i) seed_var(layer.decay_proj(i));
    for (Index i = 0; i < layer.write_proj.size(); ++i) seed_var(layer.write_proj(i));
  }
  // Constants carry explicit zero derivatives so every expression has width P.
  auto constant = [&](double v) { return AD(v, VectorXd::Zero(P)); };
  const Matrix<AD> x = inputs.unaryExpr(constant);
  ToyStack<AD> t = cast_stack<AD>(teacher);
  const AD loss = alignment_loss(mode, run_stack(h, x), run_stack(t, x));
  LossGradient out;
  out.loss = loss.value();
  out.gradient = loss.derivatives().size() == P ? loss.derivatives() : VectorXd::Zero(P);
  return out;
}

DescentLog stage1_descent(AlignmentMode mode, ToyStack<double>& hybrid, const ToyStack<double>& teacher,
                          const MatrixXd& inputs, int steps, double step_size) {
  require(steps >= 0, "steps must be non-negative");
  require(step_size > 0.0, "step size must be positive");
  DescentLog log;
  for (int s = 0; s < steps; ++s) {
    const LossGradient g = alignment_gradient(mode, hybrid, teacher, inputs);
    log.losses.push_back(g.loss);
    set_stack_gate_parameters(hybrid, stack_gate_parameters(hybrid) - step_size * g.gradient);
  }
  log.losses.push_back(alignment_loss_value(mode, hybrid, teacher, inputs));
  return log;
}

}  // namespace hybrid
