#pragma once

#include "hybrid/ssm_core.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hybrid {

enum class ShardPattern { Simple, Zigzag };

std::string_view to_string(ShardPattern p);
ShardPattern parse_shard_pattern(std::string_view name);

struct ChunkRange {
  Index begin = 0;
  Index count = 0;
};

/// Partition of [0, length) into chunks owned by ranks. Simple: one contiguous
/// chunk per rank. Zigzag: 2N chunks, rank i owns chunks i and 2N-1-i.
struct ShardPlan {
  Index ranks = 1;
  ShardPattern pattern = ShardPattern::Simple;
  Index length = 0;
  std::vector<ChunkRange> chunks;         // in global order
  std::vector<Index> owner;               // owner[c] = rank holding chunk c
  std::vector<std::vector<Index>> local;  // local[r] = chunk ids of rank r, ascending

  Index chunk_count() const { return static_cast<Index>(chunks.size()); }
};

ShardPlan shard(Index length, Index ranks, ShardPattern pattern);

struct Message {
  Index from = 0;
  Index to = 0;
  std::uint64_t bytes = 0;
  std::uint64_t time = 0;  // logical timestamp, strictly increasing per bus
  std::string tag;
};

struct RankTrace {
  std::vector<Message> sent;
  std::vector<Message> received;

  std::uint64_t bytes_sent() const;
  std::uint64_t bytes_received() const;
};

/// Deterministic in-process transport. Each (from, to) channel is FIFO and
/// every payload is a dense matrix; payload size is accounted in bytes.
class MessageBus {
 public:
  explicit MessageBus(Index ranks, std::uint64_t elem_bytes = sizeof(double));

  void send(Index from, Index to, const std::string& tag, MatrixXd payload);
  MatrixXd receive(Index to, Index from, const std::string& tag);

  const std::vector<RankTrace>& traces() const { return traces_; }
  /// Every receive matched a send and no message is left in flight.
  bool drained() const;

 private:
  struct Pending {
    Message header;
    MatrixXd payload;
  };
  Index ranks_;
  std::uint64_t elem_bytes_;
  std::uint64_t clock_ = 0;
  std::map<std::pair<Index, Index>, std::vector<Pending>> channels_;
  std::vector<RankTrace> traces_;
};

// ---- depthwise causal convolution ----

/// y_t = sum_{i=1..d_conv} w_i u_{t-d_conv+i} per channel, zero left padding.
/// `filter` is d_conv x channels, `u` is length x channels.
MatrixXd conv1d_reference(const MatrixXd& u, const MatrixXd& filter);

struct ConvSpResult {
  MatrixXd outputs;
  std::vector<RankTrace> traces;
};

/// Sharded convolution: each chunk receives the last d_conv-1 tokens of the
/// preceding chunk from its owner and convolves locally.
ConvSpResult conv1d_sp(const MatrixXd& u, const MatrixXd& filter, const ShardPlan& plan);

// ---- recurrent layers ----

struct SpForward {
  MatrixXd outputs;
  SsmState<double> final_state;
  std::vector<RankTrace> traces;
};

/// State-passing decomposition: each chunk runs from a zero state, keeps its
/// per-step cumulative transitions, then adds S_in A_{1:n} q_n once the
/// incoming state arrives. Chunks are chained in global order.
SpForward p2p_forward(SsmKind kind, const TokenSequence<double>& seq, const GateTrack<double>& gates,
                      const ShardPlan& plan);

/// Black-box layer: full sequence rows in, full sequence rows out.
using SequenceFn = std::function<MatrixXd(const MatrixXd&)>;

struct UspResult {
  MatrixXd outputs;
  std::vector<RankTrace> traces;
};

/// Gather every shard on every rank, run the layer on the full sequence,
/// keep the local slices.
UspResult usp_forward(const SequenceFn& layer, const MatrixXd& x, const ShardPlan& plan);

// ---- communication accounting ----

enum class CommMethod { P2P, A2A, USP };

std::string_view to_string(CommMethod m);
CommMethod parse_comm_method(std::string_view name);

struct CommConfig {
  std::uint64_t length = 0;       // l, tokens
  std::uint64_t width = 0;        // d, channels exchanged per token
  std::uint64_t ranks = 1;        // N_SP
  std::uint64_t state_bytes = 0;  // recurrent state payload per layer
  std::uint64_t conv_width = 4;   // d_conv
  std::uint64_t elem_bytes = 2;
  std::uint64_t heads = 0;        // head count to scatter; 0 skips the divisibility check
};

/// Bytes sent per rank for one layer's forward pass.
///   p2p: state + (d_conv - 1) d elem
///   a2a: two all-to-alls of l d elem / N each
///   usp: (N - 1)/N l d elem gathered
double comm_volume(CommMethod method, const CommConfig& config);

/// Recurrent state bytes: heads * d_k * d_v * elem.
std::uint64_t state_bytes(std::uint64_t heads, std::uint64_t d_k, std::uint64_t d_v,
                          std::uint64_t elem_bytes = 2);

}  // namespace hybrid
