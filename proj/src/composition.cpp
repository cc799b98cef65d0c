#include "hybrid/composition.hpp"

namespace hybrid {

Index Transition::dim() const {
  return is_diagonal() ? std::get<VectorXd>(op_).size() : std::get<MatrixXd>(op_).rows();
}

MatrixXd Transition::apply(const MatrixXd& X) const {
  require_shape(X.cols() == dim(), "state width differs from the transition dimension");
  if (is_diagonal()) return X * std::get<VectorXd>(op_).asDiagonal();
  return X * std::get<MatrixXd>(op_);
}

Transition Transition::then(const Transition& next) const {
  require_shape(dim() == next.dim(), "transition dimensions differ");
  if (is_diagonal() && next.is_diagonal())
    return diagonal(std::get<VectorXd>(op_).cwiseProduct(std::get<VectorXd>(next.op_)));
  return dense(next.apply(to_dense()));
}

MatrixXd Transition::to_dense() const {
  if (is_diagonal()) return std::get<VectorXd>(op_).asDiagonal();
  return std::get<MatrixXd>(op_);
}

namespace {

void check_compatible(const std::vector<ChunkRecord>& chunks) {
  require_shape(!chunks.empty(), "need at least one chunk");
  const auto& first = chunks.front();
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const auto& r = chunks[c];
    require_shape(r.S.rows() == first.S.rows() && r.S.cols() == first.S.cols() &&
                      r.has_info() == first.has_info() && r.A.dim() == first.S.cols(),
                  "chunk " + std::to_string(c) + " is incompatible with chunk 0");
    if (!all_finite(r.S) || !all_finite(r.A.to_dense()))
      throw NumericalError("chunk " + std::to_string(c) + " has non-finite entries");
  }
}

// (x then y): state x carried through y's transition, plus y's own state.
ChunkRecord fold(const ChunkRecord& x, const ChunkRecord& y) {
  ChunkRecord out;
  out.S = y.A.apply(x.S) + y.S;
  if (y.has_info()) out.H = y.A.apply(x.H) + y.H;
  out.A = x.A.then(y.A);
  out.length = x.length + y.length;
  return out;
}

ChunkRecord neutral_like(const ChunkRecord& r) {
  ChunkRecord e;
  e.S = MatrixXd::Zero(r.S.rows(), r.S.cols());
  if (r.has_info()) e.H = MatrixXd::Zero(r.H.rows(), r.H.cols());
  e.A = Transition::identity(r.A.dim());
  return e;
}

}  // namespace

ChunkRecord make_chunk_record(SsmKind kind, const TokenSequence<double>& chunk,
                              const GateTrack<double>& gates) {
  check_sequence(chunk);
  require_shape(gates.length() == chunk.length(), "gate track and chunk lengths differ");
  const Index dk = chunk.key_dim();
  ChunkRecord r;
  r.length = chunk.length();
  switch (kind) {
    case SsmKind::Mamba2: {
      r.S = ssm_forward(kind, chunk, gates).final_state.S;
      double decay = 1.0;
      for (double g : gates.decay) decay *= g;
      r.A = Transition::diagonal(VectorXd::Constant(dk, decay));
      break;
    }
    case SsmKind::GDN: {
      r.S = ssm_forward(kind, chunk, gates).final_state.S;
      MatrixXd A = MatrixXd::Identity(dk, dk);
      for (Index t = 0; t < chunk.length(); ++t)
        A = A * step_transition<double>(kind, chunk.keys.row(t).transpose(), gates.at(t));
      r.A = Transition::dense(std::move(A));
      break;
    }
    case SsmKind::GKA: {
      const auto info = gka_info_forward(chunk, gates).final_state;
      r.S = info.U;
      r.H = info.H;
      double decay = 1.0;
      for (double g : gates.decay) decay *= g;
      r.A = Transition::diagonal(VectorXd::Constant(dk, decay));
      break;
    }
  }
  return r;
}

ChunkRecord full_sequence_record(SsmKind kind, const TokenSequence<double>& seq,
                                 const GateTrack<double>& gates) {
  return make_chunk_record(kind, seq, gates);
}

ChunkRecord caso_compose(const std::vector<ChunkRecord>& chunks) {
  check_compatible(chunks);
  ChunkRecord acc = chunks.front();
  for (std::size_t c = 1; c < chunks.size(); ++c) acc = fold(acc, chunks[c]);
  return acc;
}

ChunkRecord picaso_r(const std::vector<ChunkRecord>& chunks) {
  check_compatible(chunks);
  const std::size_t K = chunks.size();
  // prefix[s] folds chunks [0, s), suffix[s] folds chunks [s, K).
  std::vector<ChunkRecord> prefix(K + 1), suffix(K + 1);
  prefix[0] = neutral_like(chunks.front());
  for (std::size_t s = 0; s < K; ++s) prefix[s + 1] = fold(prefix[s], chunks[s]);
  suffix[K] = neutral_like(chunks.front());
  for (std::size_t s = K; s-- > 0;) suffix[s] = fold(chunks[s], suffix[s + 1]);

  ChunkRecord mean = neutral_like(chunks.front());
  for (std::size_t s = 0; s < K; ++s) {
    // Ordering s, s+1, ..., K-1, 0, ..., s-1.
    const ChunkRecord rotated = fold(suffix[s], prefix[s]);
    mean.S += rotated.S;
    if (mean.has_info()) mean.H += rotated.H;
  }
  mean.S /= double(K);
  if (mean.has_info()) mean.H /= double(K);
  mean.A = prefix[K].A;
  mean.length = prefix[K].length;
  return mean;
}

GkaInfoState<double> gka_compose(const std::vector<GkaInfoState<double>>& infos, GkaMerge mode) {
  require_shape(!infos.empty(), "need at least one information state");
  GkaInfoState<double> out = infos.front();
  for (std::size_t c = 1; c < infos.size(); ++c) {
    require_shape(infos[c].H.rows() == out.H.rows() && infos[c].U.rows() == out.U.rows() &&
                      infos[c].U.cols() == out.U.cols(),
                  "information state " + std::to_string(c) + " has a different shape");
    out.H += infos[c].H;
    out.U += infos[c].U;
  }
  if (mode == GkaMerge::Soup) {
    out.H /= double(infos.size());
    out.U /= double(infos.size());
  }
  return out;
}

std::string_view to_string(MergeMode m) {
  switch (m) {
    case MergeMode::Soup:
      return "soup";
    case MergeMode::PicasoR:
      return "picaso_r";
    case MergeMode::GkaSum:
      return "gka_sum";
  }
  return "unknown";
}

MergeMode parse_merge_mode(std::string_view name) {
  if (name == "soup") return MergeMode::Soup;
  if (name == "picaso_r") return MergeMode::PicasoR;
  if (name == "gka_sum") return MergeMode::GkaSum;
  throw RangeError("unknown merge mode: " + std::string(name));
}

namespace {

LayerCache<double> merge_attention(const std::vector<LayerCache<double>>& per_chunk) {
  LayerCache<double> out;
  const Index d = per_chunk.front().keys.cols();
  std::vector<std::pair<std::size_t, Index>> keep;  // (chunk, entry)
  for (std::size_t c = 0; c < per_chunk.size(); ++c)
    for (Index e = 0; e < per_chunk[c].entries(); ++e) {
      const bool prefix = per_chunk[c].sources[static_cast<std::size_t>(e)] == kPrefixSource;
      if (!prefix || c == 0) keep.emplace_back(c, e);
    }
  out.keys.resize(static_cast<Index>(keep.size()), d);
  out.values.resize(static_cast<Index>(keep.size()), d);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const auto& src = per_chunk[keep[i].first];
    const Index e = keep[i].second;
    out.keys.row(static_cast<Index>(i)) = src.keys.row(e);
    out.values.row(static_cast<Index>(i)) = src.values.row(e);
    out.positions.push_back(src.positions[static_cast<std::size_t>(e)]);
    out.sources.push_back(src.sources[static_cast<std::size_t>(e)]);
  }
  return out;
}

LayerCache<double> merge_ssm(const std::vector<LayerCache<double>>& per_chunk, MergeMode mode,
                             Index layer) {
  LayerCache<double> out = per_chunk.front();
  const bool gka = per_chunk.front().H.size() > 0;
  std::vector<ChunkRecord> records;
  for (const auto& c : per_chunk) records.push_back({c.S, c.H, Transition::dense(c.transition), 0});
  switch (mode) {
    case MergeMode::Soup:
    case MergeMode::GkaSum: {
      if (mode == MergeMode::GkaSum && !gka)
        throw RangeError("gka_sum merging needs GKA layers; layer " + std::to_string(layer) + " is not");
      for (std::size_t c = 1; c < per_chunk.size(); ++c) {
        out.S += per_chunk[c].S;
        if (gka) out.H += per_chunk[c].H;
      }
      if (mode == MergeMode::Soup) {
        out.S /= double(per_chunk.size());
        if (gka) out.H /= double(per_chunk.size());
      }
      out.transition = caso_compose(records).A.to_dense();
      break;
    }
    case MergeMode::PicasoR: {
      const ChunkRecord merged = picaso_r(records);
      out.S = merged.S;
      out.H = merged.H;
      out.transition = merged.A.to_dense();
      break;
    }
  }
  return out;
}

}  // namespace

PrefillResult chunked_prefill(const ToyStack<double>& model, const MatrixXd& prefix, const MatrixXd& body,
                              Index chunk_len, MergeMode mode) {
  require(chunk_len >= 1, "chunk length must be >= 1");
  require_shape(body.rows() >= 1, "body must hold at least one token");
  require_shape(body.cols() == model.d_model && (prefix.rows() == 0 || prefix.cols() == model.d_model),
                "prefix/body width differs from d_model");
  const Index P = prefix.rows();
  const Index K = (body.rows() + chunk_len - 1) / chunk_len;
  PrefillResult result;
  result.chunks = K;
  result.padded = K * chunk_len - body.rows();
  result.next_position = P + chunk_len;

  RunOptions options;
  for (Index t = 0; t < P + chunk_len; ++t) options.positions.push_back(t);
  for (Index c = 0; c < K; ++c) {
    const Index begin = c * chunk_len;
    const Index real = std::min(chunk_len, body.rows() - begin);
    MatrixXd tokens = MatrixXd::Zero(P + chunk_len, model.d_model);
    if (P > 0) tokens.topRows(P) = prefix;
    tokens.middleRows(P, real) = body.middleRows(begin, real);
    options.active.assign(static_cast<std::size_t>(P + chunk_len), true);
    for (Index t = P + real; t < P + chunk_len; ++t) options.active[static_cast<std::size_t>(t)] = false;
    options.sources.assign(static_cast<std::size_t>(P), kPrefixSource);
    options.sources.resize(static_cast<std::size_t>(P + chunk_len), static_cast<int>(c));
    result.chunk_caches.push_back(run_stack(model, tokens, options).caches);
  }

  for (Index l = 0; l < model.depth(); ++l) {
    std::vector<LayerCache<double>> per_chunk;
    for (const auto& caches : result.chunk_caches) per_chunk.push_back(caches[static_cast<std::size_t>(l)]);
    const bool attention = model.layers[static_cast<std::size_t>(l)].mixer == MixerType::Attention;
    result.caches.push_back(attention ? merge_attention(per_chunk) : merge_ssm(per_chunk, mode, l));
  }
  return result;
}

StackTrace<double> query_prefill(const ToyStack<double>& model, const PrefillResult& prefill,
                                 const MatrixXd& queries) {
  RunOptions options;
  options.source = kQuerySource;
  for (Index t = 0; t < queries.rows(); ++t) options.positions.push_back(prefill.next_position + t);
  return run_stack(model, queries, options, &prefill.caches);
}

}  // namespace hybrid
