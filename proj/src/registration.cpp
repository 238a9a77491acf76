#include "demslam/registration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "demslam/error.hpp"

namespace demslam {

VoxelHash::VoxelHash(std::span<const Point3> points, double voxel) : points_(points), voxel_(voxel) {
  if (!(voxel > 0.0)) throw Error(ErrorCode::InvalidBounds, "voxel side must be positive");
  std::vector<std::uint64_t> keys(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    keys[i] = key(static_cast<std::int64_t>(std::floor(p.x() / voxel)),
                  static_cast<std::int64_t>(std::floor(p.y() / voxel)),
                  static_cast<std::int64_t>(std::floor(p.z() / voxel)));
  }
  order_.resize(points.size());
  std::iota(order_.begin(), order_.end(), 0u);
  std::stable_sort(order_.begin(), order_.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return keys[a] < keys[b]; });
  cells_.reserve(points.size() / 4 + 1);
  for (std::uint32_t s = 0; s < order_.size();) {
    std::uint32_t e = s;
    while (e < order_.size() && keys[order_[e]] == keys[order_[s]]) ++e;
    cells_.emplace(keys[order_[s]], std::make_pair(s, e));
    s = e;
  }
}

std::uint64_t VoxelHash::key(std::int64_t x, std::int64_t y, std::int64_t z) const {
  // 21 bits per axis; wraps for clouds wider than ~2M voxels, which only
  // costs extra distance checks.
  const auto m = [](std::int64_t a) { return static_cast<std::uint64_t>(a) & 0x1FFFFFu; };
  return (m(x) << 42) | (m(y) << 21) | m(z);
}

std::optional<VoxelHash::Match> VoxelHash::nearest(const Point3& p, double max_dist) const {
  const auto cx = static_cast<std::int64_t>(std::floor(p.x() / voxel_));
  const auto cy = static_cast<std::int64_t>(std::floor(p.y() / voxel_));
  const auto cz = static_cast<std::int64_t>(std::floor(p.z() / voxel_));
  std::optional<Match> best;
  double best_d2 = max_dist * max_dist;
  for (std::int64_t dx = -1; dx <= 1; ++dx) {
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      for (std::int64_t dz = -1; dz <= 1; ++dz) {
        const auto it = cells_.find(key(cx + dx, cy + dy, cz + dz));
        if (it == cells_.end()) continue;
        for (std::uint32_t s = it->second.first; s < it->second.second; ++s) {
          const std::uint32_t idx = order_[s];
          const double d2 = (points_[idx] - p).squaredNorm();
          if (d2 < best_d2 || (d2 == best_d2 && best && idx < best->index)) {
            best_d2 = d2;
            best = Match{idx, d2};
          }
        }
      }
    }
  }
  return best;
}

std::vector<Point3> stride_subsample(std::span<const Point3> points, std::size_t max_points) {
  if (max_points == 0 || points.size() <= max_points) return {points.begin(), points.end()};
  const std::size_t stride = (points.size() + max_points - 1) / max_points;
  std::vector<Point3> out;
  out.reserve(points.size() / stride + 1);
  for (std::size_t i = 0; i < points.size(); i += stride) out.push_back(points[i]);
  return out;
}

IcpResult icp_align(std::span<const Point3> src, std::span<const Point3> dst, const Sim3& init,
                    const IcpParams& params) {
  if (params.iterations < 1 || !(params.max_dist_end > 0.0) ||
      params.max_dist_start < params.max_dist_end) {
    throw Error(ErrorCode::InvalidBounds, "bad ICP parameters");
  }
  IcpResult result;
  result.transform = init;
  std::vector<Point3> a;
  std::vector<Point3> b;
  const double ratio = params.max_dist_end / params.max_dist_start;
  std::optional<VoxelHash> hash;
  for (int it = 0; it < params.iterations; ++it) {
    const double f = params.iterations == 1 ? 1.0 : static_cast<double>(it) / (params.iterations - 1);
    const double gate = params.max_dist_start * std::pow(ratio, f);
    // Rebuild only when the gate has shrunk to half the current voxel.
    if (!hash || gate < 0.5 * hash->voxel()) hash.emplace(dst, gate);
    a.clear();
    b.clear();
    for (const auto& p : src) {
      const Point3 q = result.transform * p;
      if (const auto m = hash->nearest(q, gate)) {
        a.push_back(p);
        b.push_back(dst[m->index]);
      }
    }
    if (a.size() < 3) throw Error(ErrorCode::DegenerateInput, "ICP lost its correspondences");
    result.transform = estimate_relative_sim3(a, b, {}, params.with_scale);
    result.iterations = it + 1;
  }

  const VoxelHash final_hash(dst, params.max_dist_end);
  double sum2 = 0.0;
  std::size_t matched = 0;
  for (const auto& p : src) {
    if (const auto m = final_hash.nearest(result.transform * p, params.max_dist_end)) {
      sum2 += m->dist2;
      ++matched;
    }
  }
  result.overlap = src.empty() ? 0.0 : static_cast<double>(matched) / static_cast<double>(src.size());
  result.rms = matched == 0 ? std::numeric_limits<double>::infinity()
                            : std::sqrt(sum2 / static_cast<double>(matched));
  return result;
}

}  // namespace demslam
