#pragma once

#include "hybrid/ssm_core.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace hybrid {

inline constexpr Index kDefaultTile = 64;

enum class Residency { ReloadPerIteration, Resident };

struct TileGrid {
  Index d_k = 0;
  Index d_v = 0;
  Index b_k = kDefaultTile;
  Index b_v = kDefaultTile;

  Index key_tiles() const { return d_k / b_k; }
  Index value_tiles() const { return d_v / b_v; }
};

void check_grid(const TileGrid& grid);

/// Persisted tile store holding only the lower-triangular tiles (i >= j) of a
/// symmetric d_k x d_k matrix. Loads and stores are counted per tile.
class SymmetricTileStore {
 public:
  explicit SymmetricTileStore(const TileGrid& grid);
  static SymmetricTileStore from_dense(const MatrixXd& H, const TileGrid& grid);

  const MatrixXd& load(Index i, Index j) const;
  void store(Index i, Index j, MatrixXd tile);
  /// Full matrix rebuilt from the lower tiles by mirroring.
  MatrixXd to_dense() const;

  const TileGrid& grid() const { return grid_; }
  Index persisted_tiles() const { return static_cast<Index>(tiles_.size()); }
  std::uint64_t loads() const { return loads_; }
  std::uint64_t stores() const { return stores_; }
  void reset_counters() { loads_ = stores_ = 0; }

 private:
  std::size_t slot(Index i, Index j) const;
  TileGrid grid_;
  std::vector<MatrixXd> tiles_;
  mutable std::uint64_t loads_ = 0;
  std::uint64_t stores_ = 0;
};

/// Lower-tile update H' = gamma H + beta k k^T with the Frobenius norm of H'
/// accumulated in the same pass (off-diagonal tiles counted twice).
double tiled_update_and_norm(SymmetricTileStore& H, const VectorXd& k, double decay, double write);

/// H x from lower tiles; upper blocks use the transposed mirror tile.
VectorXd tiled_matvec(const SymmetricTileStore& H, const VectorXd& x);

enum class DecodeVariant { Reference, TiledSmallBatch, TiledLargeBatch };

std::string_view to_string(DecodeVariant v);
DecodeVariant parse_decode_variant(std::string_view name);

struct DecodeOptions {
  DecodeVariant variant = DecodeVariant::Reference;
  int iterations = 30;
  double alpha = 0.05;       // lambda = alpha ||H'||_F
  double min_lambda = 1e-6;  // floor so an all-zero H' still gives an SPD system
  TileGrid grid;             // d_k, d_v filled in from the state when zero
};

struct DecodeState {
  MatrixXd H;  // d_k x d_k
  MatrixXd U;  // d_v x d_k
};

struct DecodeResult {
  VectorXd output;
  DecodeState state;
  double lambda = 0.0;
  double frobenius = 0.0;
  std::uint64_t tile_loads = 0;
  std::uint64_t tile_stores = 0;
  std::vector<double> residuals;
};

/// One GKA decode step: update (H, U), set lambda from ||H'||_F, solve
/// (H' + lambda I) x = q with `iterations` Chebyshev steps, return y = U' x.
DecodeResult decode_step(const DecodeState& state, const VectorXd& k, const VectorXd& v, const VectorXd& q,
                         double decay, double write, const DecodeOptions& options);

struct TrafficReport {
  std::uint64_t tiles_loaded = 0;
  std::uint64_t tiles_stored = 0;
  double skipped_fraction = 0.0;
};

/// Persisted H tile traffic of one decode step. Tiled variants touch only the
/// g(g+1)/2 lower tiles; the small-batch variant keeps them resident during
/// the solve, the large-batch variant reloads them every iteration.
TrafficReport traffic_model(Index d_k, Index b_k, DecodeVariant variant, int iterations);

}  // namespace hybrid
