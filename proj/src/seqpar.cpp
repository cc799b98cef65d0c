#include "hybrid/seqpar.hpp"

#include <algorithm>

namespace hybrid {

std::string_view to_string(ShardPattern p) { return p == ShardPattern::Simple ? "simple" : "zigzag"; }

ShardPattern parse_shard_pattern(std::string_view name) {
  if (name == "simple") return ShardPattern::Simple;
  if (name == "zigzag") return ShardPattern::Zigzag;
  throw RangeError("unknown shard pattern: " + std::string(name));
}

ShardPlan shard(Index length, Index ranks, ShardPattern pattern) {
  require(ranks >= 1, "need at least one rank");
  require(length >= 1, "sequence must be non-empty");
  const Index pieces = pattern == ShardPattern::Simple ? ranks : 2 * ranks;
  require(length % pieces == 0, "length " + std::to_string(length) + " is not divisible by " +
                                    std::to_string(pieces) + " (" + std::string(to_string(pattern)) +
                                    " sharding over " + std::to_string(ranks) + " ranks)");
  ShardPlan plan;
  plan.ranks = ranks;
  plan.pattern = pattern;
  plan.length = length;
  plan.local.resize(static_cast<std::size_t>(ranks));
  const Index size = length / pieces;
  for (Index c = 0; c < pieces; ++c) {
    plan.chunks.push_back({c * size, size});
    const Index r = pattern == ShardPattern::Simple ? c : (c < ranks ? c : 2 * ranks - 1 - c);
    plan.owner.push_back(r);
    plan.local[static_cast<std::size_t>(r)].push_back(c);
  }
  return plan;
}

std::uint64_t RankTrace::bytes_sent() const {
  std::uint64_t total = 0;
  for (const auto& m : sent) total += m.bytes;
  return total;
}

std::uint64_t RankTrace::bytes_received() const {
  std::uint64_t total = 0;
  for (const auto& m : received) total += m.bytes;
  return total;
}

MessageBus::MessageBus(Index ranks, std::uint64_t elem_bytes)
    : ranks_(ranks), elem_bytes_(elem_bytes), traces_(static_cast<std::size_t>(ranks)) {
  require(ranks >= 1, "need at least one rank");
}

void MessageBus::send(Index from, Index to, const std::string& tag, MatrixXd payload) {
  require(from >= 0 && from < ranks_ && to >= 0 && to < ranks_, "rank out of range");
  Message m{from, to, static_cast<std::uint64_t>(payload.size()) * elem_bytes_, ++clock_, tag};
  traces_[static_cast<std::size_t>(from)].sent.push_back(m);
  channels_[{from, to}].push_back({m, std::move(payload)});
}

MatrixXd MessageBus::receive(Index to, Index from, const std::string& tag) {
  auto it = channels_.find({from, to});
  if (it == channels_.end() || it->second.empty())
    throw Error("rank " + std::to_string(to) + " expected '" + tag + "' from rank " +
                std::to_string(from) + " but nothing was sent");
  Pending p = std::move(it->second.front());
  it->second.erase(it->second.begin());
  if (p.header.tag != tag)
    throw Error("rank " + std::to_string(to) + " expected '" + tag + "' but received '" + p.header.tag + "'");
  Message m = p.header;
  m.time = ++clock_;
  traces_[static_cast<std::size_t>(to)].received.push_back(m);
  return std::move(p.payload);
}

bool MessageBus::drained() const {
  for (const auto& [key, queue] : channels_)
    if (!queue.empty()) return false;
  std::size_t sent = 0, received = 0;
  for (const auto& t : traces_) {
    sent += t.sent.size();
    received += t.received.size();
  }
  return sent == received;
}

namespace {

// One output of the causal depthwise conv from the d_conv rows ending at t.
void conv_row(const MatrixXd& window, const MatrixXd& filter, Eigen::Ref<RowVectorXd, 0, Eigen::InnerStride<>> out) {
  out.setZero();
  for (Index i = 0; i < filter.rows(); ++i) out += filter.row(i).cwiseProduct(window.row(i));
}

void check_filter(const MatrixXd& u, const MatrixXd& filter) {
  require(filter.rows() >= 1, "d_conv must be >= 1");
  require_shape(filter.cols() == u.cols(), "filter has " + std::to_string(filter.cols()) +
                                               " channels but the input has " + std::to_string(u.cols()));
}

}  // namespace

MatrixXd conv1d_reference(const MatrixXd& u, const MatrixXd& filter) {
  check_filter(u, filter);
  const Index d = filter.rows(), T = u.rows();
  MatrixXd padded = MatrixXd::Zero(T + d - 1, u.cols());
  padded.bottomRows(T) = u;
  MatrixXd y(T, u.cols());
  for (Index t = 0; t < T; ++t) conv_row(padded.middleRows(t, d), filter, y.row(t));
  return y;
}

ConvSpResult conv1d_sp(const MatrixXd& u, const MatrixXd& filter, const ShardPlan& plan) {
  check_filter(u, filter);
  require_shape(u.rows() == plan.length, "input length differs from the shard plan");
  const Index d = filter.rows(), halo = d - 1;
  for (const auto& c : plan.chunks)
    require(halo <= c.count, "d_conv - 1 = " + std::to_string(halo) + " exceeds the local chunk length " +
                                 std::to_string(c.count));
  MessageBus bus(plan.ranks);
  auto tail = [&](Index c) -> MatrixXd {
    const auto& r = plan.chunks[static_cast<std::size_t>(c)];
    return u.middleRows(r.begin + r.count - halo, halo);
  };
  // Every chunk owner sends its tail to the owner of the next chunk.
  if (halo > 0)
    for (Index c = 0; c + 1 < plan.chunk_count(); ++c) {
      const Index from = plan.owner[static_cast<std::size_t>(c)];
      const Index to = plan.owner[static_cast<std::size_t>(c + 1)];
      if (from != to) bus.send(from, to, "conv_halo", tail(c));
    }
  ConvSpResult result;
  result.outputs.resize(u.rows(), u.cols());
  for (Index c = 0; c < plan.chunk_count(); ++c) {
    const auto& r = plan.chunks[static_cast<std::size_t>(c)];
    const Index me = plan.owner[static_cast<std::size_t>(c)];
    MatrixXd local = MatrixXd::Zero(r.count + halo, u.cols());
    if (halo > 0 && c > 0) {
      const Index prev = plan.owner[static_cast<std::size_t>(c - 1)];
      local.topRows(halo) = prev == me ? tail(c - 1) : bus.receive(me, prev, "conv_halo");
    }
    local.bottomRows(r.count) = u.middleRows(r.begin, r.count);
    for (Index t = 0; t < r.count; ++t)
      conv_row(local.middleRows(t, d), filter, result.outputs.row(r.begin + t));
  }
  if (!bus.drained()) throw Error("conv halo exchange left unmatched messages");
  result.traces = bus.traces();
  return result;
}

SpForward p2p_forward(SsmKind kind, const TokenSequence<double>& seq, const GateTrack<double>& gates,
                      const ShardPlan& plan) {
  if (kind == SsmKind::GKA)
    throw RangeError(
        "p2p state passing needs transitions that do not depend on the incoming state; "
        "GKA's erase direction depends on the accumulated key statistics");
  check_sequence(seq);
  require_shape(seq.length() == plan.length && gates.length() == plan.length,
                "sequence, gates and shard plan lengths differ");
  const Index dk = seq.key_dim(), dv = seq.value_dim();

  // Local phase: every chunk from a zero state, independently.
  struct Local {
    MatrixXd outputs;      // zero-init outputs
    MatrixXd readout;      // rows (A_{1:t} q_t)^T
    MatrixXd state;        // zero-init final state
    MatrixXd transition;   // A_{1:n}
  };
  std::vector<Local> locals;
  for (const auto& r : plan.chunks) {
    Local L{MatrixXd(r.count, dv), MatrixXd(r.count, dk), MatrixXd::Zero(dv, dk), MatrixXd::Identity(dk, dk)};
    SsmState<double> state = SsmState<double>::zero(kind, dk, dv);
    for (Index t = 0; t < r.count; ++t) {
      const Index g = r.begin + t;
      const VectorXd k = seq.keys.row(g).transpose(), q = seq.queries.row(g).transpose();
      state = ssm_step<double>(kind, state, k, seq.values.row(g).transpose(), gates.at(g));
      L.transition = L.transition * step_transition<double>(kind, k, gates.at(g));
      L.outputs.row(t) = (state.S * q).transpose();
      L.readout.row(t) = (L.transition * q).transpose();
    }
    L.state = state.S;
    locals.push_back(std::move(L));
  }

  // Correction phase: states travel chunk to chunk in global order.
  MessageBus bus(plan.ranks);
  SpForward out;
  out.outputs.resize(seq.length(), dv);
  MatrixXd incoming = MatrixXd::Zero(dv, dk);
  for (Index c = 0; c < plan.chunk_count(); ++c) {
    const auto& r = plan.chunks[static_cast<std::size_t>(c)];
    const Index me = plan.owner[static_cast<std::size_t>(c)];
    if (c > 0) {
      const Index prev = plan.owner[static_cast<std::size_t>(c - 1)];
      if (prev != me) incoming = bus.receive(me, prev, "state");
    }
    const Local& L = locals[static_cast<std::size_t>(c)];
    out.outputs.middleRows(r.begin, r.count) = L.outputs + L.readout * incoming.transpose();
    MatrixXd outgoing = L.state + incoming * L.transition;
    if (c + 1 < plan.chunk_count()) {
      const Index next = plan.owner[static_cast<std::size_t>(c + 1)];
      if (next != me) bus.send(me, next, "state", outgoing);
    }
    incoming = std::move(outgoing);
  }
  if (!bus.drained()) throw Error("state passing left unmatched messages");
  out.final_state = SsmState<double>{incoming, MatrixXd()};
  out.traces = bus.traces();
  return out;
}

UspResult usp_forward(const SequenceFn& layer, const MatrixXd& x, const ShardPlan& plan) {
  require_shape(x.rows() == plan.length, "input length differs from the shard plan");
  MessageBus bus(plan.ranks);
  for (Index src = 0; src < plan.ranks; ++src)
    for (Index dst = 0; dst < plan.ranks; ++dst) {
      if (dst == src) continue;
      for (Index c : plan.local[static_cast<std::size_t>(src)]) {
        const auto& r = plan.chunks[static_cast<std::size_t>(c)];
        bus.send(src, dst, "gather", x.middleRows(r.begin, r.count));
      }
    }
  UspResult result;
  result.outputs.resize(x.rows(), 0);
  bool sized = false;
  for (Index me = 0; me < plan.ranks; ++me) {
    MatrixXd full(x.rows(), x.cols());
    for (Index src = 0; src < plan.ranks; ++src)
      for (Index c : plan.local[static_cast<std::size_t>(src)]) {
        const auto& r = plan.chunks[static_cast<std::size_t>(c)];
        full.middleRows(r.begin, r.count) =
            src == me ? MatrixXd(x.middleRows(r.begin, r.count)) : bus.receive(me, src, "gather");
      }
    const MatrixXd y = layer(full);
    require_shape(y.rows() == x.rows(), "layer must return one row per token");
    if (!sized) {
      result.outputs.resize(y.rows(), y.cols());
      sized = true;
    }
    for (Index c : plan.local[static_cast<std::size_t>(me)]) {
      const auto& r = plan.chunks[static_cast<std::size_t>(c)];
      result.outputs.middleRows(r.begin, r.count) = y.middleRows(r.begin, r.count);
    }
  }
  if (!bus.drained()) throw Error("gather left unmatched messages");
  result.traces = bus.traces();
  return result;
}

std::string_view to_string(CommMethod m) {
  switch (m) {
    case CommMethod::P2P:
      return "p2p";
    case CommMethod::A2A:
      return "a2a";
    case CommMethod::USP:
      return "usp";
  }
  return "unknown";
}

CommMethod parse_comm_method(std::string_view name) {
  if (name == "p2p") return CommMethod::P2P;
  if (name == "a2a") return CommMethod::A2A;
  if (name == "usp") return CommMethod::USP;
  throw RangeError("unknown communication method: " + std::string(name));
}

double comm_volume(CommMethod method, const CommConfig& c) {
  require(c.length >= 1 && c.width >= 1 && c.ranks >= 1 && c.elem_bytes >= 1 && c.conv_width >= 1,
          "communication parameters must be positive");
  const double tokens = double(c.length) * double(c.width) * double(c.elem_bytes);
  switch (method) {
    case CommMethod::P2P:
      return double(c.state_bytes) + double(c.conv_width - 1) * double(c.width) * double(c.elem_bytes);
    case CommMethod::A2A:
      if (c.heads > 0)
        require(c.heads % c.ranks == 0, "a2a scatters heads: " + std::to_string(c.heads) +
                                            " heads are not divisible by N_SP = " + std::to_string(c.ranks));
      return 2.0 * tokens / double(c.ranks);
    case CommMethod::USP:
      return double(c.ranks - 1) / double(c.ranks) * tokens;
  }
  return 0.0;
}

std::uint64_t state_bytes(std::uint64_t heads, std::uint64_t d_k, std::uint64_t d_v, std::uint64_t elem_bytes) {
  return heads * d_k * d_v * elem_bytes;
}

}  // namespace hybrid
