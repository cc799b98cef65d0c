#include "hybrid/priming.hpp"

#include <doctest.h>

using namespace hybrid;

namespace {

// Loop-based repeat-and-average oracle for the gate initialisation.
MatrixXd gate_oracle(const MatrixXd& W_O, const MatrixXd& W_V, Index m, Index head_dim) {
  MatrixXd out(W_O.cols(), W_O.rows());
  for (Index row = 0; row < out.rows(); ++row) {
    const Index q_head = row / head_dim, within = row % head_dim;
    const Index kv_row = (q_head / m) * head_dim + within;
    for (Index c = 0; c < out.cols(); ++c) out(row, c) = 0.5 * (W_O(c, row) + W_V(kv_row, c));
  }
  return out;
}

LayerEvaluator synthetic(const std::vector<double>& drops) {
  return [drops](std::optional<Index> layer, Index) -> std::vector<double> {
    if (!layer) return {1.0, 1.0};
    const double d = drops[static_cast<std::size_t>(*layer)];
    return {1.0 - d, 1.0 - d};
  };
}

ImportanceTable table_of(const std::vector<double>& importance) {
  ImportanceTable t;
  t.baseline = 1.0;
  t.importance = importance;
  for (double i : importance) t.scores.push_back(1.0 - i);
  return t;
}

double central_difference(AlignmentMode mode, const ToyStack<double>& hybrid, const ToyStack<double>& teacher,
                          const MatrixXd& inputs, Index i, double h) {
  ToyStack<double> probe = hybrid;
  VectorXd theta = stack_gate_parameters(hybrid);
  theta(i) += h;
  set_stack_gate_parameters(probe, theta);
  const double up = alignment_loss_value(mode, probe, teacher, inputs);
  theta(i) -= 2 * h;
  set_stack_gate_parameters(probe, theta);
  const double down = alignment_loss_value(mode, probe, teacher, inputs);
  return (up - down) / (2 * h);
}

}  // namespace

TEST_CASE("transfer copies projections verbatim") {
  Rng rng(1);
  AttentionWeights w = random_attention_weights(4, 1, 1, 4, rng);
  w.W_Q = MatrixXd::Identity(4, 4);
  const SsmLayerWeights s = transfer_weights(w, SsmKind::GDN);
  CHECK(s.W_Q == MatrixXd::Identity(4, 4));
  CHECK(s.W_K == w.W_K);
  CHECK(s.W_V == w.W_V);
  CHECK(s.W_O == w.W_O);
  CHECK(s.kv_expansion == 1);
}

TEST_CASE("grouped KV heads are tagged for expansion") {
  Rng rng(2);
  const AttentionWeights w = random_attention_weights(16, 4, 2, 4, rng, true);
  const SsmLayerWeights s = transfer_weights(w, SsmKind::GKA);
  CHECK(s.kv_expansion == 2);
  CHECK(s.W_K.rows() == 8);
  CHECK(s.q_norm == w.q_norm);
  CHECK(s.conv.rows() == kDefaultConvWidth);
  CHECK(s.conv.cols() == 2 * 2 * 4);
  CHECK(s.regularizer.size() == 4);
  CHECK((s.regularizer.array() > 0.0).all());
}

TEST_CASE("transfer with the same seed is bitwise reproducible") {
  Rng rng(3);
  const AttentionWeights w = random_attention_weights(8, 2, 1, 4, rng);
  const SsmLayerWeights a = transfer_weights(w, SsmKind::Mamba2, 99), b = transfer_weights(w, SsmKind::Mamba2, 99);
  CHECK(a.decay_proj == b.decay_proj);
  CHECK(a.write_bias == b.write_bias);
  CHECK(a.conv == b.conv);
  CHECK(a.W_G == b.W_G);
  const SsmLayerWeights c = transfer_weights(w, SsmKind::Mamba2, 100);
  CHECK(a.decay_proj != c.decay_proj);
}

TEST_CASE("transfer rejects indivisible head counts") {
  Rng rng(4);
  AttentionWeights w = random_attention_weights(8, 4, 2, 4, rng);
  w.num_q_heads = 3;
  CHECK_THROWS_AS(transfer_weights(w, SsmKind::GDN), RangeError);
}

TEST_CASE("gate init closed forms") {
  CHECK(gate_init(MatrixXd::Identity(4, 4), MatrixXd::Identity(4, 4), 1, 4) == MatrixXd::Identity(4, 4));
  Rng rng(5);
  const MatrixXd W_O = random_normal(6, 8, rng);
  CHECK(gate_init(W_O, MatrixXd::Zero(4, 6), 2, 2) == 0.5 * W_O.transpose());
}

TEST_CASE("gate init duplicates value heads before blending") {
  Rng rng(6);
  const Index d_model = 5, head_dim = 3, kv_heads = 2, m = 2;
  const MatrixXd W_O = random_normal(d_model, kv_heads * m * head_dim, rng);
  const MatrixXd W_V = random_normal(kv_heads * head_dim, d_model, rng);
  const MatrixXd G = gate_init(W_O, W_V, m, head_dim);
  CHECK((G - gate_oracle(W_O, W_V, m, head_dim)).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(gate_init(W_O, W_V, 3, head_dim), ShapeError);
}

TEST_CASE("AGQA at initialisation equals GQA replication") {
  Rng rng(7);
  const AgqaParams p = agqa_init(8, 2, 4);
  CHECK(p.W2.isZero(0.0));
  for (int trial = 0; trial < 200; ++trial) {
    const MatrixXd X = random_normal(2, 4, rng, 3.0);
    CHECK(agqa_forward(p, X) == gqa_replicate(X, 4));
  }
  CHECK(agqa_forward(p, MatrixXd::Zero(2, 4)).isZero(0.0));
}

TEST_CASE("GQA replication repeats each head consecutively") {
  MatrixXd X(2, 3);
  X << 1, 2, 3, 4, 5, 6;
  const MatrixXd Y = gqa_replicate(X, 3);
  CHECK(Y.rows() == 6);
  for (Index r = 0; r < 6; ++r) CHECK(Y.row(r) == X.row(r / 3));
}

TEST_CASE("AGQA perturbation equals the dense low-rank term and obeys the norm bound") {
  Rng rng(8);
  AgqaParams p = agqa_init(4, 2, 3, 5, 11);
  p.W2 = random_normal(p.W2.rows(), p.W2.cols(), rng, 0.01);
  const MatrixXd X = random_normal(2, 3, rng);
  // Dense row-major flattening by hand.
  VectorXd flat(6);
  for (Index h = 0; h < 2; ++h)
    for (Index c = 0; c < 3; ++c) flat(h * 3 + c) = X(h, c);
  VectorXd hidden = p.W1 * flat;
  for (Index i = 0; i < hidden.size(); ++i) hidden(i) = hidden(i) / (1.0 + std::exp(-hidden(i)));
  const VectorXd low = p.W2 * hidden;
  MatrixXd expected = gqa_replicate(X, 2);
  for (Index h = 0; h < 4; ++h)
    for (Index c = 0; c < 3; ++c) expected(h, c) += low(h * 3 + c);
  const MatrixXd Y = agqa_forward(p, X);
  CHECK((Y - expected).cwiseAbs().maxCoeff() < 1e-14);
  const double perturbation = (Y - gqa_replicate(X, 2)).norm();
  CHECK(perturbation <= p.W2.norm() * hidden.norm() + 1e-15);
}

TEST_CASE("insensitive evaluator gives zero importance") {
  auto flat = [](std::optional<Index>, Index) { return std::vector<double>{0.7, 0.9}; };
  const ImportanceTable t = importance_scores(flat, 4, 16);
  CHECK(t.layers() == 4);
  for (double i : t.importance) CHECK(i == 0.0);
}

TEST_CASE("synthetic evaluator importances are read back") {
  const ImportanceTable t = importance_scores(synthetic({0.0, 0.2, 0.05}), 3, 8);
  CHECK(t.baseline == 1.0);
  CHECK(t.importance[0] == 0.0);
  CHECK(t.importance[1] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(t.importance[2] == doctest::Approx(0.05).epsilon(1e-15));
}

TEST_CASE("evaluator failures carry the layer index") {
  auto failing = [](std::optional<Index> layer, Index) -> std::vector<double> {
    if (layer && *layer == 1) throw std::runtime_error("boom");
    return {1.0};
  };
  try {
    importance_scores(failing, 3, 8);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
    CHECK(std::string(e.what()).find("boom") != std::string::npos);
  }
  auto bad = [](std::optional<Index>, Index) { return std::vector<double>{1.5}; };
  CHECK_THROWS_AS(importance_scores(bad, 2, 8), RangeError);
}

TEST_CASE("layer selection") {
  CHECK(select_layers(table_of({0.0, 0.2, 0.05}), 0).empty());
  CHECK(select_layers(table_of({0.0, 0.2, 0.05}), 2) == std::vector<Index>{0, 2});
  CHECK(select_layers(table_of({0.1, 0.1, 0.1, 0.1}), 2) == std::vector<Index>{0, 1});
  CHECK(select_layers(table_of({0.3, 0.1, 0.1, 0.0}), 2) == std::vector<Index>{1, 3});
  CHECK_THROWS_AS(select_layers(table_of({0.1}), 2), RangeError);
}

TEST_CASE("recall evaluator: the long-range layer is strictly the most important") {
  RecallTaskConfig cfg;
  const RecallEvaluator eval(cfg);
  const ImportanceTable t = importance_scores(std::cref(eval), RecallEvaluator::layers(), 8);
  // Exhaustive single-layer substitution oracle.
  std::vector<double> drops;
  const auto base = eval(std::nullopt, 8);
  for (Index l = 0; l < 3; ++l) {
    const auto s = eval(l, 8);
    double b = 0, v = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      b += base[i];
      v += s[i];
    }
    drops.push_back((b - v) / double(s.size()));
  }
  for (Index l = 0; l < 3; ++l) CHECK(t.importance[static_cast<std::size_t>(l)] == doctest::Approx(drops[static_cast<std::size_t>(l)]));
  CHECK(t.importance[2] > t.importance[0]);
  CHECK(t.importance[2] > t.importance[1]);
  CHECK(t.baseline == 1.0);
  const auto chosen = select_layers(t, 2);
  CHECK(chosen == std::vector<Index>{0, 1});
}

TEST_CASE("alignment loss of identical traces is zero") {
  Rng rng(9);
  const ToyStack<double> teacher = random_attention_stack(2, 6, 4, 8, rng);
  const MatrixXd x = random_normal(5, 6, rng);
  const auto trace = run_stack(teacher, x);
  CHECK(alignment_loss(AlignmentMode::EndToEnd, trace, trace) == 0.0);
  CHECK(alignment_loss(AlignmentMode::Layerwise, trace, trace) == 0.0);
}

TEST_CASE("layerwise loss averages per-layer squared differences") {
  Rng rng(10);
  StackTrace<double> a;
  for (int i = 0; i < 5; ++i) a.hidden.push_back(random_normal(3, 4, rng));
  a.final_normed = rms_normalize<double>(a.hidden.back());
  StackTrace<double> b = a;
  const MatrixXd delta = random_normal(3, 4, rng);
  b.hidden[1] += delta;
  CHECK(layerwise_alignment_loss(a, b) == doctest::Approx(0.25 * delta.squaredNorm()).epsilon(1e-14));
  CHECK(e2e_alignment_loss(a, b) == 0.0);
}

TEST_CASE("primed hybrid replaces the chosen layers and seeds the gate") {
  Rng rng(11);
  const ToyStack<double> teacher = random_attention_stack(3, 8, 4, 12, rng);
  const ToyStack<double> hybrid = prime_hybrid(teacher, {1}, SsmKind::GDN, 5);
  CHECK(hybrid.layers[0].mixer == MixerType::Attention);
  CHECK(hybrid.layers[1].mixer == MixerType::Ssm);
  CHECK(hybrid.layers[1].Wq == teacher.layers[1].Wq);
  CHECK(hybrid.layers[1].Wg == gate_oracle(teacher.layers[1].Wo, teacher.layers[1].Wv, 1, 4));
  CHECK_THROWS_AS(prime_hybrid(hybrid, {1}, SsmKind::GDN), RangeError);
  CHECK_THROWS_AS(prime_hybrid(teacher, {3}, SsmKind::GDN), RangeError);
}

TEST_CASE("gate parameters round-trip") {
  Rng rng(12);
  ToyStack<double> hybrid = prime_hybrid(random_attention_stack(2, 6, 4, 8, rng), {0, 1}, SsmKind::Mamba2);
  VectorXd theta = stack_gate_parameters(hybrid);
  CHECK(theta.size() == 2 * (2 + 2 * 6));
  theta.array() += 0.25;
  set_stack_gate_parameters(hybrid, theta);
  CHECK(stack_gate_parameters(hybrid) == theta);
  CHECK_THROWS_AS(set_stack_gate_parameters(hybrid, VectorXd::Zero(3)), ShapeError);
}

TEST_CASE("alignment gradients match central differences on a 2-layer hybrid") {
  for (SsmKind kind : kAllSsmKinds)
    for (AlignmentMode mode : {AlignmentMode::EndToEnd, AlignmentMode::Layerwise}) {
      CAPTURE(to_string(kind));
      CAPTURE(to_string(mode));
      Rng rng(13);
      const ToyStack<double> teacher = random_attention_stack(2, 6, 4, 8, rng);
      const ToyStack<double> hybrid = prime_hybrid(teacher, {1}, kind, 21);
      const MatrixXd x = random_normal(6, 6, rng);
      const LossGradient g = alignment_gradient(mode, hybrid, teacher, x);
      CHECK(g.loss == doctest::Approx(alignment_loss_value(mode, hybrid, teacher, x)).epsilon(1e-14));
      for (Index i = 0; i < g.gradient.size(); ++i) {
        const double fd = central_difference(mode, hybrid, teacher, x, i, 1e-5);
        const double scale = std::max({std::abs(fd), std::abs(g.gradient(i)), 1e-8});
        CHECK(std::abs(fd - g.gradient(i)) / scale < 1e-5);
      }
    }
}

TEST_CASE("stage one descent lowers the alignment loss") {
  Rng rng(14);
  const ToyStack<double> teacher = random_attention_stack(2, 8, 4, 16, rng);
  ToyStack<double> hybrid = prime_hybrid(teacher, {1}, SsmKind::GDN);
  const MatrixXd x = random_normal(8, 8, rng);
  const DescentLog log = stage1_descent(AlignmentMode::EndToEnd, hybrid, teacher, x, 5, 0.05);
  CHECK(log.losses.size() == 6);
  CHECK(log.losses.back() < log.losses.front());
}
