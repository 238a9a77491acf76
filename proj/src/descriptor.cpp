#include "demslam/descriptor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "binary_io.hpp"
#include "demslam/error.hpp"

namespace demslam {
namespace {

constexpr std::string_view kTokenMagic{"DEMTOK1\0", 8};
constexpr std::string_view kDescriptorMagic{"DEMDSC1\0", 8};

double axis_derivative(double lo, double center, double hi) {
  const bool has_lo = !is_empty(lo);
  const bool has_hi = !is_empty(hi);
  if (has_lo && has_hi) return 0.5 * (hi - lo);
  if (has_hi) return hi - center;
  if (has_lo) return center - lo;
  return 0.0;
}

}  // namespace

void EncoderSpec::validate() const {
  if (dim < 8) throw Error(ErrorCode::ConfigError, "encoder dimension must be >= 8");
  if (patch_px < 1) throw Error(ErrorCode::ConfigError, "patch_px must be >= 1");
  if (kind == EncoderKind::BuiltinGradHist && dim != kBuiltinDim) {
    throw Error(ErrorCode::ConfigError, "builtin encoder dimension is fixed at 16");
  }
}

int orientation_bin(double d_col, double d_row) {
  if (d_col == 0.0 && d_row == 0.0) return -1;
  // Quarter turns are exact sign swaps, so a 90 degree image rotation moves
  // every gradient by exactly two bins.
  double x = d_col;
  double y = d_row;
  int quarter = 0;
  while (!(x > 0.0 && y >= 0.0)) {
    const double nx = y;
    y = -x;
    x = nx;
    ++quarter;
  }
  return 2 * quarter + (y < x ? 0 : 1);
}

std::vector<PatchToken> encode_builtin(const Region& region, int patch_px, int dim) {
  if (patch_px < 1) throw Error(ErrorCode::ConfigError, "patch_px must be >= 1");
  if (dim < 11) throw Error(ErrorCode::ConfigError, "builtin features need at least 11 dims");
  if (region.rows <= 0 || region.cols <= 0) {
    throw Error(ErrorCode::AllEmptyRegion, "region has no cells");
  }
  const int prow = (region.rows + patch_px - 1) / patch_px;
  const int pcol = (region.cols + patch_px - 1) / patch_px;
  std::vector<PatchToken> tokens;
  tokens.reserve(static_cast<std::size_t>(prow) * pcol);
  bool any_valid = false;

  for (int pr = 0; pr < prow; ++pr) {
    for (int pc = 0; pc < pcol; ++pc) {
      const int r0 = pr * patch_px;
      const int c0 = pc * patch_px;
      // Neighbors outside the patch read as EMPTY, which keeps tokens local.
      const auto px = [&](int r, int c) {
        if (r < r0 || c < c0 || r >= r0 + patch_px || c >= c0 + patch_px) return kEmpty;
        return region.at(r, c);
      };
      double hist[8] = {};
      double sum = 0.0;
      double sum_sq = 0.0;
      int valid = 0;
      for (int r = r0; r < r0 + patch_px; ++r) {
        for (int c = c0; c < c0 + patch_px; ++c) {
          const double v = px(r, c);
          if (is_empty(v)) continue;
          ++valid;
          sum += v;
          sum_sq += v * v;
          const double dc = axis_derivative(px(r, c - 1), v, px(r, c + 1));
          const double dr = axis_derivative(px(r - 1, c), v, px(r + 1, c));
          const int bin = orientation_bin(dc, dr);
          if (bin >= 0) hist[bin] += std::hypot(dc, dr);
        }
      }
      any_valid = any_valid || valid > 0;

      PatchToken tok;
      tok.position = {r0 + 0.5 * patch_px, c0 + 0.5 * patch_px};
      tok.feature = Eigen::VectorXd::Zero(dim);
      double hnorm = 0.0;
      for (double h : hist) hnorm += h * h;
      hnorm = std::sqrt(hnorm);
      if (hnorm > 0.0) {
        for (int b = 0; b < 8; ++b) tok.feature(b) = hist[b] / hnorm;
      }
      if (valid > 0) {
        const double mean = sum / valid;
        tok.feature(8) = mean;
        tok.feature(9) = std::max(0.0, sum_sq / valid - mean * mean);
      }
      tok.feature(10) = 1.0 - static_cast<double>(valid) / (patch_px * patch_px);
      tokens.push_back(std::move(tok));
    }
  }
  if (!any_valid) throw Error(ErrorCode::AllEmptyRegion, "region has no observed cells");
  return tokens;
}

std::vector<double> gaussian_weights(std::span<const Eigen::Vector2d> positions,
                                     const Eigen::Vector2d& center, double sigma) {
  if (!(sigma > 0.0)) throw Error(ErrorCode::InvalidSigma, "Gaussian sigma must be positive");
  std::vector<double> w(positions.size());
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t j = 0; j < positions.size(); ++j) {
    w[j] = std::exp(-(positions[j] - center).squaredNorm() * inv);
  }
  return w;
}

std::vector<double> visibility_mask(std::span<const double> patch_mean_gradient,
                                    double region_p99) {
  std::vector<double> m(patch_mean_gradient.size(), 0.0);
  if (!(region_p99 > 0.0)) return m;
  for (std::size_t j = 0; j < m.size(); ++j) {
    const double g = patch_mean_gradient[j];
    if (is_empty(g)) continue;
    m[j] = std::clamp(g / region_p99, 0.0, 1.0);
  }
  return m;
}

Descriptor pool_descriptor(std::span<const PatchToken> tokens, std::span<const double> w,
                           std::span<const double> m) {
  if (tokens.size() != w.size() || tokens.size() != m.size()) {
    throw Error(ErrorCode::DimensionMismatch, "tokens, weights and masks differ in length");
  }
  if (tokens.empty()) throw Error(ErrorCode::NoSalientContent, "no tokens to pool");
  const auto dim = tokens.front().feature.size();
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim);
  double norm = 0.0;
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    if (tokens[j].feature.size() != dim) {
      throw Error(ErrorCode::DimensionMismatch, "token dimensions differ");
    }
    const double wm = w[j] * m[j];
    if (wm == 0.0) continue;
    acc += wm * tokens[j].feature;
    norm += wm;
  }
  if (!(norm > 0.0)) throw Error(ErrorCode::NoSalientContent, "all tokens have zero weight");
  acc /= norm;
  Descriptor d;
  const double len = acc.norm();
  d.normalized = len > 0.0;
  d.vector = d.normalized ? Eigen::VectorXd(acc / len) : acc;
  return d;
}

std::vector<PatchToken> BuiltinEncoder::encode_tile(TileIndex tile,
                                                    const TiledRaster& intensity) const {
  const auto it = intensity.tiles.find(tile);
  if (it == intensity.tiles.end()) throw Error(ErrorCode::AllEmptyRegion, "tile not present");
  Region region{intensity.tile_px, intensity.tile_px, it->second};
  return encode_builtin(region, patch_px_);
}

void PrecomputedEncoder::add(TileIndex tile, std::vector<PatchToken> tokens) {
  for (const auto& t : tokens) {
    if (t.feature.size() != dim_) {
      throw Error(ErrorCode::FormatError, "token dimension does not match encoder");
    }
  }
  tokens_[tile] = std::move(tokens);
}

std::vector<PatchToken> PrecomputedEncoder::encode_tile(TileIndex tile,
                                                        const TiledRaster& /*intensity*/) const {
  const auto it = tokens_.find(tile);
  if (it == tokens_.end()) {
    throw Error(ErrorCode::DependencyError, "no precomputed tokens for tile (" +
                                                std::to_string(tile.u) + "," +
                                                std::to_string(tile.v) + ")");
  }
  return it->second;
}

TileEmbedder::TileEmbedder(const TiledRaster& intensity, const TiledRaster& gradient,
                           const TokenEncoder& encoder)
    : tile_px_(intensity.tile_px), patch_px_(encoder.patch_px()) {
  const double half = 0.5 * patch_px_;
  for (const auto& [idx, data] : intensity.tiles) {
    std::vector<PatchToken> toks = encoder.encode_tile(idx, intensity);
    const Eigen::Vector2d origin(static_cast<double>(idx.v) * tile_px_,
                                 static_cast<double>(idx.u) * tile_px_);
    std::vector<double> grads;
    grads.reserve(toks.size());
    for (auto& t : toks) {
      t.position += origin;
      const int r0 = static_cast<int>(std::floor(t.position.x() - half));
      const int c0 = static_cast<int>(std::floor(t.position.y() - half));
      double sum = 0.0;
      int n = 0;
      for (int r = r0; r < r0 + patch_px_; ++r) {
        for (int c = c0; c < c0 + patch_px_; ++c) {
          const double g = gradient.at(c, r);
          if (is_empty(g)) continue;
          sum += g;
          ++n;
        }
      }
      grads.push_back(n > 0 ? sum / n : kEmpty);
    }
    tokens_.emplace(idx, std::move(toks));
    token_grad_.emplace(idx, std::move(grads));

    std::vector<double> samples;
    if (const auto g = gradient.tiles.find(idx); g != gradient.tiles.end()) {
      for (double v : g->second) {
        if (!is_empty(v)) samples.push_back(v);
      }
    }
    pixel_grad_.emplace(idx, std::move(samples));
  }
}

Descriptor TileEmbedder::pool_block(const std::vector<TileIndex>& block, TileIndex center) const {
  std::vector<PatchToken> toks;
  std::vector<double> grads;
  std::vector<double> samples;
  for (const TileIndex& idx : block) {
    const auto& t = tokens_.at(idx);
    toks.insert(toks.end(), t.begin(), t.end());
    const auto& g = token_grad_.at(idx);
    grads.insert(grads.end(), g.begin(), g.end());
    const auto& s = pixel_grad_.at(idx);
    samples.insert(samples.end(), s.begin(), s.end());
  }
  if (toks.empty()) throw Error(ErrorCode::AllEmptyRegion, "pooling region has no tokens");

  std::vector<Eigen::Vector2d> pos;
  pos.reserve(toks.size());
  for (const auto& t : toks) pos.push_back(t.position);
  const Eigen::Vector2d c((center.v + 0.5) * tile_px_, (center.u + 0.5) * tile_px_);
  const auto w = gaussian_weights(pos, c, static_cast<double>(tile_px_));
  const double p99 = samples.empty() ? 0.0 : percentile(std::move(samples), 99.0);
  const auto m = visibility_mask(grads, p99);
  return pool_descriptor(toks, w, m);
}

Descriptor TileEmbedder::embed_global_tile(TileIndex tile, int nbhd) const {
  if (!tokens_.contains(tile)) throw Error(ErrorCode::AllEmptyRegion, "tile not present");
  const int half = nbhd / 2;
  std::vector<TileIndex> block;
  for (const auto& [idx, toks] : tokens_) {
    if (std::abs(idx.u - tile.u) <= half && std::abs(idx.v - tile.v) <= half) {
      block.push_back(idx);
    }
  }
  return pool_block(block, tile);
}

Descriptor TileEmbedder::embed_query_chip(TileIndex chip) const {
  if (!tokens_.contains(chip)) throw Error(ErrorCode::AllEmptyRegion, "chip not present");
  std::vector<TileIndex> block;
  for (const auto& [idx, toks] : tokens_) block.push_back(idx);
  return pool_block(block, chip);
}

RenderedLayer render_layer(const DemGrid& grid, const HeightRange& range, double alpha_edge) {
  const TiledRaster base = normalize_heights(grid, range);
  return {edge_enhance(base, alpha_edge), sobel_magnitude(base)};
}

Descriptor embed_global_tile(const DemGrid& grid, TileIndex tile, const TokenEncoder& encoder,
                             double alpha_edge, int nbhd) {
  const DemGrid* one[] = {&grid};
  const RenderedLayer layer = render_layer(grid, height_percentiles(one, 0.5, 99.5), alpha_edge);
  return TileEmbedder(layer.intensity, layer.gradient, encoder).embed_global_tile(tile, nbhd);
}

Descriptor embed_query_chip(const DemGrid& submap_dem, TileIndex chip,
                            const TokenEncoder& encoder, double alpha_edge) {
  const DemGrid* one[] = {&submap_dem};
  const RenderedLayer layer =
      render_layer(submap_dem, height_percentiles(one, 0.5, 99.5), alpha_edge);
  return TileEmbedder(layer.intensity, layer.gradient, encoder).embed_query_chip(chip);
}

void save_tokens(const std::filesystem::path& path, std::span<const PatchToken> tokens, int dim,
                 int patch_px) {
  detail::ByteWriter w;
  w.bytes(kTokenMagic);
  w.u32(static_cast<std::uint32_t>(tokens.size()));
  w.u32(static_cast<std::uint32_t>(dim));
  w.u32(static_cast<std::uint32_t>(patch_px));
  for (const auto& t : tokens) {
    if (t.feature.size() != dim) throw Error(ErrorCode::DimensionMismatch, "token dimension");
    w.f32(static_cast<float>(t.position.x()));
    w.f32(static_cast<float>(t.position.y()));
    for (int k = 0; k < dim; ++k) w.f32(static_cast<float>(t.feature(k)));
  }
  w.save(path);
}

TokenFile load_precomputed_tokens(const std::filesystem::path& path, int expected_dim) {
  detail::ByteReader r(path);
  r.expect_magic(kTokenMagic);
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  const std::uint32_t patch = r.u32();
  if (dim == 0 || patch == 0) throw Error(ErrorCode::FormatError, r.name() + ": zero D or patch");
  if (expected_dim > 0 && dim != static_cast<std::uint32_t>(expected_dim)) {
    throw Error(ErrorCode::FormatError, r.name() + ": D=" + std::to_string(dim) +
                                            " but encoder expects " + std::to_string(expected_dim));
  }
  const std::size_t record = (2 + static_cast<std::size_t>(dim)) * sizeof(float);
  if (r.remaining() != record * count) {
    throw Error(ErrorCode::FormatError, r.name() + ": payload size does not match header");
  }
  TokenFile file;
  file.dim = static_cast<int>(dim);
  file.patch_px = static_cast<int>(patch);
  file.tokens.resize(count);
  for (auto& t : file.tokens) {
    const float row = r.f32();
    const float col = r.f32();
    t.position = {row, col};
    t.feature.resize(dim);
    for (std::uint32_t k = 0; k < dim; ++k) t.feature(k) = r.f32();
    if (!t.position.allFinite() || !t.feature.allFinite()) {
      throw Error(ErrorCode::FormatError, r.name() + ": non-finite token value");
    }
  }
  return file;
}

void save_descriptors(const std::filesystem::path& path, std::span<const DescriptorRecord> records,
                      int dim) {
  detail::ByteWriter w;
  w.bytes(kDescriptorMagic);
  w.u32(static_cast<std::uint32_t>(records.size()));
  w.u32(static_cast<std::uint32_t>(dim));
  for (const auto& rec : records) {
    if (rec.vector.size() != dim) throw Error(ErrorCode::DimensionMismatch, "descriptor dimension");
    w.u64(rec.id);
    for (int k = 0; k < dim; ++k) w.f32(static_cast<float>(rec.vector(k)));
  }
  w.save(path);
}

std::vector<DescriptorRecord> load_descriptors(const std::filesystem::path& path) {
  detail::ByteReader r(path);
  r.expect_magic(kDescriptorMagic);
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  const std::size_t record = sizeof(std::uint64_t) + static_cast<std::size_t>(dim) * sizeof(float);
  if (r.remaining() != record * count) {
    throw Error(ErrorCode::FormatError, r.name() + ": payload size does not match header");
  }
  std::vector<DescriptorRecord> out(count);
  for (auto& rec : out) {
    rec.id = r.u64();
    rec.vector.resize(dim);
    for (std::uint32_t k = 0; k < dim; ++k) rec.vector(k) = r.f32();
  }
  return out;
}

}  // namespace demslam
