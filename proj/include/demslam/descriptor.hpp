#pragma once

// Geometry-aware tile and chip descriptors: Gaussian-weighted,
// visibility-masked pooling of patch tokens from a pluggable encoder.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "demslam/dem.hpp"

namespace demslam {

/// Positions are continuous pixel coordinates (row, col); pixel (r, c)
/// covers [r, r+1) x [c, c+1), so a patch starting at r0 is centered at
/// r0 + patch_px / 2.
struct PatchToken {
  Eigen::Vector2d position{0.0, 0.0};
  Eigen::VectorXd feature;
};

struct Descriptor {
  Eigen::VectorXd vector;
  bool normalized{false};
};

enum class EncoderKind { BuiltinGradHist, PrecomputedTokens };

struct EncoderSpec {
  EncoderKind kind{EncoderKind::BuiltinGradHist};
  int dim{16};
  int patch_px{4};

  void validate() const;
};

inline constexpr int kBuiltinDim = 16;

/// Dense row-major raster; EMPTY cells are kEmpty.
struct Region {
  int rows{0};
  int cols{0};
  std::vector<double> values;

  [[nodiscard]] double at(int r, int c) const {
    if (r < 0 || c < 0 || r >= rows || c >= cols) return kEmpty;
    return values[static_cast<std::size_t>(r) * cols + c];
  }
};

/// Deterministic stand-in encoder. Per patch: unit-norm 8-bin
/// magnitude-weighted gradient orientation histogram, intensity mean and
/// variance, EMPTY fraction, zero padding up to dim. Gradients use only
/// pixels of the patch itself. A trailing partial patch is padded with EMPTY.
/// Throws AllEmptyRegion when no cell is observed.
std::vector<PatchToken> encode_builtin(const Region& region, int patch_px, int dim = kBuiltinDim);

/// Octant (0..7) of a gradient direction measured from +col toward +row;
/// -1 for a zero gradient.
int orientation_bin(double d_col, double d_row);

/// exp(-|pos - center|^2 / (2 sigma^2)). Throws InvalidSigma for sigma <= 0.
std::vector<double> gaussian_weights(std::span<const Eigen::Vector2d> positions,
                                     const Eigen::Vector2d& center, double sigma);

/// clip(mean patch gradient / region_p99, 0, 1); NaN means (all-EMPTY
/// patches) and a non-positive normalizer give 0.
std::vector<double> visibility_mask(std::span<const double> patch_mean_gradient,
                                    double region_p99);

/// Weighted mean of token features, then l2-normalized. Throws
/// NoSalientContent when sum(w * m) is zero.
Descriptor pool_descriptor(std::span<const PatchToken> tokens, std::span<const double> w,
                           std::span<const double> m);

/// Source of per-tile tokens; positions are tile-local.
class TokenEncoder {
 public:
  virtual ~TokenEncoder() = default;
  [[nodiscard]] virtual int dim() const = 0;
  [[nodiscard]] virtual int patch_px() const = 0;
  [[nodiscard]] virtual std::vector<PatchToken> encode_tile(TileIndex tile,
                                                            const TiledRaster& intensity) const = 0;
};

class BuiltinEncoder final : public TokenEncoder {
 public:
  explicit BuiltinEncoder(int patch_px = 4) : patch_px_(patch_px) {}
  [[nodiscard]] int dim() const override { return kBuiltinDim; }
  [[nodiscard]] int patch_px() const override { return patch_px_; }
  [[nodiscard]] std::vector<PatchToken> encode_tile(TileIndex tile,
                                                    const TiledRaster& intensity) const override;

 private:
  int patch_px_;
};

/// Tokens loaded ahead of time, e.g. from a foundation-model exporter.
class PrecomputedEncoder final : public TokenEncoder {
 public:
  PrecomputedEncoder(int dim, int patch_px) : dim_(dim), patch_px_(patch_px) {}
  void add(TileIndex tile, std::vector<PatchToken> tokens);
  [[nodiscard]] int dim() const override { return dim_; }
  [[nodiscard]] int patch_px() const override { return patch_px_; }
  [[nodiscard]] std::vector<PatchToken> encode_tile(TileIndex tile,
                                                    const TiledRaster& intensity) const override;

 private:
  int dim_;
  int patch_px_;
  std::map<TileIndex, std::vector<PatchToken>> tokens_;
};

/// A rendered DEM layer with its tokens cached per tile. `intensity` feeds
/// the encoder; `gradient` (Sobel magnitude of the normalized heights) feeds
/// the visibility masks.
class TileEmbedder {
 public:
  TileEmbedder(const TiledRaster& intensity, const TiledRaster& gradient,
               const TokenEncoder& encoder);

  /// Pools over the nbhd x nbhd tile block centered on `tile`, clipped at the
  /// grid borders; sigma is one tile side.
  [[nodiscard]] Descriptor embed_global_tile(TileIndex tile, int nbhd = 9) const;

  /// Pools over every tile of the layer, centered on `chip`; sigma is one
  /// chip side.
  [[nodiscard]] Descriptor embed_query_chip(TileIndex chip) const;

  [[nodiscard]] bool has_tile(TileIndex tile) const { return tokens_.contains(tile); }

 private:
  [[nodiscard]] Descriptor pool_block(const std::vector<TileIndex>& block, TileIndex center) const;

  int tile_px_;
  int patch_px_;
  std::map<TileIndex, std::vector<PatchToken>> tokens_;   // global pixel positions
  std::map<TileIndex, std::vector<double>> token_grad_;   // mean gradient per token
  std::map<TileIndex, std::vector<double>> pixel_grad_;   // observed gradient samples
};

/// Intensity and gradient layers for a height grid, normalized with a given
/// global height range.
struct RenderedLayer {
  TiledRaster intensity;
  TiledRaster gradient;
};
RenderedLayer render_layer(const DemGrid& grid, const HeightRange& range, double alpha_edge);

Descriptor embed_global_tile(const DemGrid& grid, TileIndex tile, const TokenEncoder& encoder,
                             double alpha_edge = 0.95, int nbhd = 9);
Descriptor embed_query_chip(const DemGrid& submap_dem, TileIndex chip,
                            const TokenEncoder& encoder, double alpha_edge = 0.95);

// Binary token files: "DEMTOK1\0", u32 count, u32 D, u32 patch_px, then
// count x (f32 row, f32 col, D x f32), little-endian.
struct TokenFile {
  int dim{0};
  int patch_px{0};
  std::vector<PatchToken> tokens;
};
void save_tokens(const std::filesystem::path& path, std::span<const PatchToken> tokens, int dim,
                 int patch_px);
/// Throws FormatError on a bad header, truncated payload, or when
/// expected_dim > 0 and differs from the stored D.
TokenFile load_precomputed_tokens(const std::filesystem::path& path, int expected_dim = 0);

// Descriptor files: "DEMDSC1\0", u32 count, u32 D, then count x (u64 id, D x f32).
struct DescriptorRecord {
  std::uint64_t id{0};
  Eigen::VectorXd vector;
};
void save_descriptors(const std::filesystem::path& path, std::span<const DescriptorRecord> records,
                      int dim);
std::vector<DescriptorRecord> load_descriptors(const std::filesystem::path& path);

}  // namespace demslam
