#pragma once

#include "hybrid/toy_stack.hpp"

#include <string_view>
#include <variant>
#include <vector>

namespace hybrid {

/// Accumulated transition of a chunk, applied on the right of the state:
/// diagonal (decay-only kinds) or dense (GDN).
class Transition {
 public:
  Transition() = default;
  static Transition diagonal(VectorXd d) { return Transition(std::move(d)); }
  static Transition dense(MatrixXd m) { return Transition(std::move(m)); }
  static Transition identity(Index dim) { return diagonal(VectorXd::Ones(dim)); }

  Index dim() const;
  bool is_diagonal() const { return std::holds_alternative<VectorXd>(op_); }

  /// X * A.
  MatrixXd apply(const MatrixXd& X) const;
  /// This transition followed by `next`: A_this * A_next.
  Transition then(const Transition& next) const;
  MatrixXd to_dense() const;

 private:
  explicit Transition(VectorXd d) : op_(std::move(d)) {}
  explicit Transition(MatrixXd m) : op_(std::move(m)) {}
  std::variant<VectorXd, MatrixXd> op_;
};

/// Final state of one chunk run from a zero state, plus its accumulated transition.
/// For GKA, S holds U and H the key statistics; both evolve under the same decay.
struct ChunkRecord {
  MatrixXd S;
  MatrixXd H;  // GKA only
  Transition A;
  Index length = 0;

  bool has_info() const { return H.size() > 0; }
};

/// Runs one chunk from zero state. GKA records use the information form.
ChunkRecord make_chunk_record(SsmKind kind, const TokenSequence<double>& chunk,
                              const GateTrack<double>& gates);

/// Full-sequence state in the same representation as a ChunkRecord
/// (recurrence state for Mamba2/GDN, (H, U) for GKA).
ChunkRecord full_sequence_record(SsmKind kind, const TokenSequence<double>& seq,
                                 const GateTrack<double>& gates);

/// S = S^(K) + sum_{c<K} S^(c) A^(c+1) ... A^(K), likewise for H.
/// The merged record carries the ordered product of all transitions.
ChunkRecord caso_compose(const std::vector<ChunkRecord>& chunks);

/// Mean of caso_compose over the K cyclic orderings, via prefix and suffix folds.
ChunkRecord picaso_r(const std::vector<ChunkRecord>& chunks);

enum class GkaMerge { Sum, Soup };

GkaInfoState<double> gka_compose(const std::vector<GkaInfoState<double>>& infos, GkaMerge mode);

// ---- chunked prefill of a toy hybrid ----

enum class MergeMode { Soup, PicasoR, GkaSum };

std::string_view to_string(MergeMode m);
MergeMode parse_merge_mode(std::string_view name);

struct PrefillResult {
  std::vector<LayerCache<double>> caches;  // merged, one per layer
  std::vector<std::vector<LayerCache<double>>> chunk_caches;  // per chunk, before merging
  Index chunks = 0;
  Index padded = 0;             // null tokens appended to the last chunk
  Index next_position = 0;      // first free position id after the reused chunk positions
};

/// Splits `body` into chunks of `chunk_len` rows (padding the last one with
/// inactive tokens), prepends `prefix` to each, runs every chunk from empty
/// caches with identical position ids, keeps a single copy of the prefix KV
/// entries and merges SSM states per `mode`.
PrefillResult chunked_prefill(const ToyStack<double>& model, const MatrixXd& prefix, const MatrixXd& body,
                              Index chunk_len, MergeMode mode = MergeMode::Soup);

/// Runs query tokens on top of merged caches and returns the trace.
StackTrace<double> query_prefill(const ToyStack<double>& model, const PrefillResult& prefill,
                                 const MatrixXd& queries);

}  // namespace hybrid
