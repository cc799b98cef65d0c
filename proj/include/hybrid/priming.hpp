#pragma once

#include "hybrid/toy_stack.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hybrid {

/// Multi-head attention projections with grouped KV heads.
struct AttentionWeights {
  Index num_q_heads = 1;
  Index num_kv_heads = 1;
  Index head_dim = 1;
  MatrixXd W_Q;     // (H_Q d_head) x d_model
  MatrixXd W_K;     // (H_KV d_head) x d_model
  MatrixXd W_V;     // (H_KV d_head) x d_model
  MatrixXd W_O;     // d_model x (H_Q d_head)
  VectorXd q_norm;  // d_head scales, empty when the model has no QK norm
  VectorXd k_norm;

  Index d_model() const { return W_Q.cols(); }
  Index group_size() const { return num_q_heads / num_kv_heads; }
};

void check_attention_weights(const AttentionWeights& w);

AttentionWeights random_attention_weights(Index d_model, Index num_q_heads, Index num_kv_heads,
                                          Index head_dim, Rng& rng, bool qk_norm = false);

/// SSM layer parameters after the Stage-0 transfer.
struct SsmLayerWeights {
  SsmKind kind = SsmKind::Mamba2;
  Index num_q_heads = 1;
  Index num_kv_heads = 1;
  Index head_dim = 1;
  // K and V paths still hold H_KV heads; they are expanded by this factor at run time.
  Index kv_expansion = 1;
  MatrixXd W_Q, W_K, W_V, W_O, W_G;
  VectorXd q_norm, k_norm;

  // Layer-specific parameters drawn at random: per-head gate projections and biases,
  // a short causal conv over the K/V channels, and the GKA regulariser per head.
  MatrixXd decay_proj, write_proj;  // H_Q x d_model
  VectorXd decay_bias, write_bias;  // H_Q
  MatrixXd conv;                    // d_conv x (2 H_KV d_head)
  VectorXd regularizer;             // H_Q, GKA only
};

inline constexpr Index kDefaultConvWidth = 4;

SsmLayerWeights transfer_weights(const AttentionWeights& src, SsmKind kind,
                                 std::uint64_t seed = kDefaultSeed);

/// Repeats each block of `head_dim` rows `m` times, head by head.
MatrixXd repeat_interleave_heads(const MatrixXd& W, Index m, Index head_dim);

/// W_G = 0.5 (W_O^T + repeat_interleave(W_V, m)).
MatrixXd gate_init(const MatrixXd& W_O, const MatrixXd& W_V, Index m, Index head_dim);

/// Low-rank-plus-residual expansion of H_KV head rows to H_Q rows.
struct AgqaParams {
  Index num_q_heads = 1;
  Index num_kv_heads = 1;
  Index head_dim = 1;
  MatrixXd W1;  // r x (H_KV d_head)
  MatrixXd W2;  // (H_Q d_head) x r
  MatrixXd R;   // H_Q x H_KV
  bool residual_learnable = false;
};

inline constexpr Index kDefaultAgqaRank = 8;

/// W2 = 0 and R = I_{H_KV} (x) 1_{m x 1}; W1 is seeded random.
AgqaParams agqa_init(Index num_q_heads, Index num_kv_heads, Index head_dim,
                     Index rank = kDefaultAgqaRank, std::uint64_t seed = kDefaultSeed);

/// mat(W2 silu(W1 vec(X))) + R X with row-major vec/mat. X is H_KV x d_head.
MatrixXd agqa_forward(const AgqaParams& p, const MatrixXd& X);

/// Plain GQA replication: each row of X repeated m times.
MatrixXd gqa_replicate(const MatrixXd& X, Index m);

// ---- layer selection ----

/// Per-task scores in [0, 1] of the model with at most one layer swapped to SWA(window).
using LayerEvaluator =
    std::function<std::vector<double>(std::optional<Index> swapped_layer, Index window)>;

struct ImportanceTable {
  double baseline = 0.0;
  std::vector<double> scores;      // mean retained score with layer i swapped
  std::vector<double> importance;  // baseline - scores[i]

  Index layers() const { return static_cast<Index>(scores.size()); }
};

inline constexpr Index kDefaultSelectionWindow = 2048;

ImportanceTable importance_scores(const LayerEvaluator& evaluator, Index layers, Index window);

/// The M least important layers, ties broken by smaller index, returned ascending.
std::vector<Index> select_layers(const ImportanceTable& table, Index M);

struct RecallTaskConfig {
  Index length = 32;
  Index vocab = 8;
  Index samples = 16;
  double sharpness = 20.0;
  std::uint64_t seed = kDefaultSeed;
};

/// Copy/recall probe over a 3-layer mixer stack. Layer 0 attends to the current
/// token, layer 1 to the previous token and layer 2 to the first token; each
/// layer writes into its own residual slot and one task reads each slot back.
/// Only layer 2 needs context longer than a short window.
class RecallEvaluator {
 public:
  explicit RecallEvaluator(const RecallTaskConfig& config = {});

  std::vector<double> operator()(std::optional<Index> swapped_layer, Index window) const;
  static constexpr Index layers() { return 3; }

 private:
  RecallTaskConfig config_;
  std::vector<std::vector<Index>> sequences_;
};

// ---- alignment ----

enum class AlignmentMode { EndToEnd, Layerwise };

std::string_view to_string(AlignmentMode m);
AlignmentMode parse_alignment_mode(std::string_view name);

/// ||norm(X_L^hybrid) - norm(X_L^teacher)||_F^2 on the final normed states.
template <typename Scalar>
Scalar e2e_alignment_loss(const StackTrace<Scalar>& hybrid, const StackTrace<Scalar>& teacher) {
  require_shape(hybrid.final_normed.rows() == teacher.final_normed.rows() &&
                    hybrid.final_normed.cols() == teacher.final_normed.cols(),
                "final hidden states differ in shape");
  return (hybrid.final_normed - teacher.final_normed).squaredNorm();
}

/// Mean over layers i = 1..L of ||X_i^teacher - X_i^hybrid||_F^2, each model
/// running its own layer on its own previous output.
template <typename Scalar>
Scalar layerwise_alignment_loss(const StackTrace<Scalar>& hybrid, const StackTrace<Scalar>& teacher) {
  require_shape(hybrid.hidden.size() == teacher.hidden.size() && hybrid.hidden.size() >= 2,
                "traces must hold the same number of layers");
  Scalar total(0);
  for (std::size_t i = 1; i < hybrid.hidden.size(); ++i) {
    require_shape(hybrid.hidden[i].rows() == teacher.hidden[i].rows() &&
                      hybrid.hidden[i].cols() == teacher.hidden[i].cols(),
                  "hidden states differ in shape at layer " + std::to_string(i));
    total += (teacher.hidden[i] - hybrid.hidden[i]).squaredNorm();
  }
  return total / Scalar(double(hybrid.hidden.size() - 1));
}

template <typename Scalar>
Scalar alignment_loss(AlignmentMode mode, const StackTrace<Scalar>& hybrid,
                      const StackTrace<Scalar>& teacher) {
  return mode == AlignmentMode::EndToEnd ? e2e_alignment_loss(hybrid, teacher)
                                         : layerwise_alignment_loss(hybrid, teacher);
}

/// Teacher copy with the listed layers turned into SSM layers. Projections are
/// copied, W_G comes from gate_init and gate parameters are seeded random.
ToyStack<double> prime_hybrid(const ToyStack<double>& teacher, const std::vector<Index>& ssm_layers,
                              SsmKind kind, std::uint64_t seed = kDefaultSeed);

/// Trainable SSM gate parameters of one layer, flattened as
/// [decay_bias, write_bias, decay_proj..., write_proj...].
VectorXd gate_parameters(const ToyLayer<double>& layer);
void set_gate_parameters(ToyLayer<double>& layer, const VectorXd& theta);

double alignment_loss_value(AlignmentMode mode, const ToyStack<double>& hybrid,
                            const ToyStack<double>& teacher, const MatrixXd& inputs);

struct LossGradient {
  double loss = 0.0;
  VectorXd gradient;  // w.r.t. gate_parameters of every SSM layer, concatenated in layer order
};

/// Forward-mode autodiff gradient of the alignment loss w.r.t. SSM gate parameters.
LossGradient alignment_gradient(AlignmentMode mode, const ToyStack<double>& hybrid,
                                const ToyStack<double>& teacher, const MatrixXd& inputs);

/// Flattened gate parameters of every SSM layer, and the inverse.
VectorXd stack_gate_parameters(const ToyStack<double>& hybrid);
void set_stack_gate_parameters(ToyStack<double>& hybrid, const VectorXd& theta);

struct DescentLog {
  std::vector<double> losses;  // before each step, plus the final loss
};

/// Plain gradient descent with a fixed step on the SSM gate parameters only.
DescentLog stage1_descent(AlignmentMode mode, ToyStack<double>& hybrid, const ToyStack<double>& teacher,
                          const MatrixXd& inputs, int steps, double step_size);

}  // namespace hybrid
