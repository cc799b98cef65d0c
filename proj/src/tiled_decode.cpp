#include "hybrid/tiled_decode.hpp"

#include <cmath>

namespace hybrid {

void check_grid(const TileGrid& g) {
  require(g.d_k >= 1 && g.d_v >= 1 && g.b_k >= 1 && g.b_v >= 1, "tile grid sizes must be positive");
  require(g.d_k % g.b_k == 0, "b_k = " + std::to_string(g.b_k) + " does not divide d_k = " + std::to_string(g.d_k));
  require(g.d_v % g.b_v == 0, "b_v = " + std::to_string(g.b_v) + " does not divide d_v = " + std::to_string(g.d_v));
}

SymmetricTileStore::SymmetricTileStore(const TileGrid& grid) : grid_(grid) {
  check_grid(grid);
  const Index g = grid.key_tiles();
  tiles_.assign(static_cast<std::size_t>(g * (g + 1) / 2), MatrixXd::Zero(grid.b_k, grid.b_k));
}

SymmetricTileStore SymmetricTileStore::from_dense(const MatrixXd& H, const TileGrid& grid) {
  require_shape(H.rows() == grid.d_k && H.cols() == grid.d_k, "H must be d_k x d_k");
  if (H != H.transpose()) throw RangeError("H must be symmetric");
  SymmetricTileStore s(grid);
  const Index b = grid.b_k;
  for (Index i = 0; i < grid.key_tiles(); ++i)
    for (Index j = 0; j <= i; ++j) s.tiles_[s.slot(i, j)] = H.block(i * b, j * b, b, b);
  return s;
}

std::size_t SymmetricTileStore::slot(Index i, Index j) const {
  require(j <= i && i < grid_.key_tiles() && j >= 0, "only lower tiles (i >= j) are persisted");
  return static_cast<std::size_t>(i * (i + 1) / 2 + j);
}

const MatrixXd& SymmetricTileStore::load(Index i, Index j) const {
  ++loads_;
  return tiles_[slot(i, j)];
}

void SymmetricTileStore::store(Index i, Index j, MatrixXd tile) {
  require_shape(tile.rows() == grid_.b_k && tile.cols() == grid_.b_k, "tile has the wrong shape");
  ++stores_;
  tiles_[slot(i, j)] = std::move(tile);
}

MatrixXd SymmetricTileStore::to_dense() const {
  const Index b = grid_.b_k;
  MatrixXd H(grid_.d_k, grid_.d_k);
  for (Index i = 0; i < grid_.key_tiles(); ++i)
    for (Index j = 0; j <= i; ++j) {
      const MatrixXd& t = tiles_[slot(i, j)];
      H.block(i * b, j * b, b, b) = t;
      if (i != j) H.block(j * b, i * b, b, b) = t.transpose();
    }
  return H;
}

double tiled_update_and_norm(SymmetricTileStore& H, const VectorXd& k, double decay, double write) {
  const TileGrid& g = H.grid();
  require_shape(k.size() == g.d_k, "key length differs from d_k");
  require(decay >= 0.0 && decay <= 1.0 && write >= 0.0 && write <= 1.0, "gates must lie in [0, 1]");
  const Index b = g.b_k;
  double accumulator = 0.0;
  for (Index i = 0; i < g.key_tiles(); ++i)
    for (Index j = 0; j <= i; ++j) {
      // Materialize the outer product first so diagonal tiles stay bitwise symmetric.
      const MatrixXd outer = k.segment(i * b, b) * k.segment(j * b, b).transpose();
      MatrixXd tile = decay * H.load(i, j) + write * outer;
      accumulator += (i == j ? 1.0 : 2.0) * tile.squaredNorm();
      H.store(i, j, std::move(tile));
    }
  return std::sqrt(accumulator);
}

VectorXd tiled_matvec(const SymmetricTileStore& H, const VectorXd& x) {
  const TileGrid& g = H.grid();
  require_shape(x.size() == g.d_k, "vector length differs from d_k");
  const Index b = g.b_k;
  VectorXd y = VectorXd::Zero(g.d_k);
  for (Index i = 0; i < g.key_tiles(); ++i)
    for (Index j = 0; j <= i; ++j) {
      const MatrixXd& t = H.load(i, j);
      y.segment(i * b, b) += t * x.segment(j * b, b);
      if (i != j) y.segment(j * b, b) += t.transpose() * x.segment(i * b, b);
    }
  return y;
}

std::string_view to_string(DecodeVariant v) {
  switch (v) {
    case DecodeVariant::Reference:
      return "reference";
    case DecodeVariant::TiledSmallBatch:
      return "tiled_small_batch";
    case DecodeVariant::TiledLargeBatch:
      return "tiled_large_batch";
  }
  return "unknown";
}

DecodeVariant parse_decode_variant(std::string_view name) {
  if (name == "reference") return DecodeVariant::Reference;
  if (name == "tiled_small_batch") return DecodeVariant::TiledSmallBatch;
  if (name == "tiled_large_batch") return DecodeVariant::TiledLargeBatch;
  throw RangeError("unknown decode variant: " + std::string(name));
}

namespace {

// U' = gamma U + beta v k^T and y = U x, one b_v x b_k tile at a time.
MatrixXd tiled_value_update(const MatrixXd& U, const VectorXd& k, const VectorXd& v, double decay,
                            double write, const TileGrid& g) {
  MatrixXd out(U.rows(), U.cols());
  for (Index i = 0; i < g.value_tiles(); ++i)
    for (Index j = 0; j < g.key_tiles(); ++j)
      out.block(i * g.b_v, j * g.b_k, g.b_v, g.b_k) =
          decay * U.block(i * g.b_v, j * g.b_k, g.b_v, g.b_k) +
          write * (v.segment(i * g.b_v, g.b_v) * k.segment(j * g.b_k, g.b_k).transpose());
  return out;
}

VectorXd tiled_value_readout(const MatrixXd& U, const VectorXd& x, const TileGrid& g) {
  VectorXd y = VectorXd::Zero(U.rows());
  for (Index i = 0; i < g.value_tiles(); ++i)
    for (Index j = 0; j < g.key_tiles(); ++j)
      y.segment(i * g.b_v, g.b_v) += U.block(i * g.b_v, j * g.b_k, g.b_v, g.b_k) * x.segment(j * g.b_k, g.b_k);
  return y;
}

}  // namespace

DecodeResult decode_step(const DecodeState& state, const VectorXd& k, const VectorXd& v, const VectorXd& q,
                         double decay, double write, const DecodeOptions& options) {
  const Index dk = state.H.rows(), dv = state.U.rows();
  require_shape(state.H.cols() == dk && state.U.cols() == dk, "H must be d_k x d_k and U d_v x d_k");
  require_shape(k.size() == dk && q.size() == dk && v.size() == dv, "k, q, v dimensions differ from the state");
  require(options.iterations >= 1, "at least one Chebyshev iteration is required");
  require(options.alpha > 0.0 && options.min_lambda > 0.0, "alpha and the lambda floor must be positive");
  if (state.H != state.H.transpose()) throw RangeError("H must be symmetric");
  TileGrid grid = options.grid;
  if (grid.d_k == 0) grid.d_k = dk;
  if (grid.d_v == 0) grid.d_v = dv;
  require_shape(grid.d_k == dk && grid.d_v == dv, "tile grid dimensions differ from the state");
  check_grid(grid);

  DecodeResult out;
  auto solve = [&](auto&& apply_h) {
    out.lambda = std::max(options.alpha * out.frobenius, options.min_lambda);
    const SpectralBounds bounds{out.lambda, out.lambda + out.frobenius};
    auto res = chebyshev_solve<double>(apply_h, out.lambda, q, options.iterations, bounds);
    out.residuals = std::move(res.residual_history);
    return std::move(res.solution);
  };

  if (options.variant == DecodeVariant::Reference) {
    const MatrixXd outer = k * k.transpose();
    out.state.H = decay * state.H + write * outer;
    out.state.U = decay * state.U + write * (v * k.transpose());
    out.frobenius = out.state.H.norm();
    const VectorXd x = solve([&](const VectorXd& z) -> VectorXd { return out.state.H * z; });
    out.output = out.state.U * x;
    const TrafficReport t = traffic_model(dk, grid.b_k, options.variant, options.iterations);
    out.tile_loads = t.tiles_loaded;
    out.tile_stores = t.tiles_stored;
  } else {
    SymmetricTileStore store = SymmetricTileStore::from_dense(state.H, grid);
    store.reset_counters();
    out.frobenius = tiled_update_and_norm(store, k, decay, write);
    VectorXd x;
    if (options.variant == DecodeVariant::TiledLargeBatch) {
      x = solve([&](const VectorXd& z) { return tiled_matvec(store, z); });
    } else {
      // Tiles stay in the working set for the whole solve: no further persisted loads.
      const SymmetricTileStore resident = store;
      x = solve([&](const VectorXd& z) { return tiled_matvec(resident, z); });
    }
    out.tile_loads = store.loads();
    out.tile_stores = store.stores();
    out.state.H = store.to_dense();
    out.state.U = tiled_value_update(state.U, k, v, decay, write, grid);
    out.output = tiled_value_readout(out.state.U, x, grid);
  }
  if (!all_finite(out.output)) throw NumericalError("decode step diverged: non-finite output");
  return out;
}

TrafficReport traffic_model(Index d_k, Index b_k, DecodeVariant variant, int iterations) {
  require(b_k >= 1 && d_k >= 1 && d_k % b_k == 0,
          "b_k = " + std::to_string(b_k) + " must divide d_k = " + std::to_string(d_k));
  require(iterations >= 1, "iterations must be >= 1");
  const auto g = static_cast<std::uint64_t>(d_k / b_k);
  const auto r = static_cast<std::uint64_t>(iterations);
  const std::uint64_t lower = g * (g + 1) / 2, all = g * g;
  TrafficReport t;
  switch (variant) {
    case DecodeVariant::Reference:
      t.tiles_loaded = all * (1 + r);
      t.tiles_stored = all;
      t.skipped_fraction = 0.0;
      break;
    case DecodeVariant::TiledLargeBatch:
      t.tiles_loaded = lower * (1 + r);
      t.tiles_stored = lower;
      t.skipped_fraction = double(g * (g - 1)) / double(2 * g * g);
      break;
    case DecodeVariant::TiledSmallBatch:
      t.tiles_loaded = lower;
      t.tiles_stored = lower;
      t.skipped_fraction = double(g * (g - 1)) / double(2 * g * g);
      break;
  }
  return t;
}

}  // namespace hybrid
