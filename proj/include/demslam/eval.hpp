#pragma once

// Trajectory association, alignment, ATE, and TUM/KITTI file I/O.

#include <filesystem>
#include <span>
#include <vector>

#include "demslam/sim3.hpp"

namespace demslam {

struct TrajectorySample {
  double timestamp{0.0};
  Sim3 pose;
};

/// Samples with strictly increasing timestamps.
using Trajectory = std::vector<TrajectorySample>;

struct PosePair {
  std::size_t est{0};
  std::size_t gt{0};
  Eigen::Vector3d est_position;
  Eigen::Vector3d gt_position;
};

/// Greedy global nearest-timestamp matching: all candidate pairs with
/// |dt| <= max_dt are taken in order of |dt| (then est, then gt index), each
/// sample at most once. Result is sorted by est index. Throws NoAssociation.
std::vector<PosePair> associate(const Trajectory& est, const Trajectory& gt, double max_dt = 0.02);

/// Least-squares Sim(3) (or SE(3)) mapping est onto gt.
Sim3 umeyama_align(std::span<const Eigen::Vector3d> est, std::span<const Eigen::Vector3d> gt,
                   bool with_scale = true);
Sim3 umeyama_align(std::span<const PosePair> pairs, bool with_scale = true);

/// sqrt(mean |gt - alignment * est|^2) over the pairs.
double ate_rmse(std::span<const PosePair> pairs, const Sim3& alignment);

struct AteResult {
  double rmse{0.0};
  Sim3 alignment;
  std::size_t pairs{0};
};
AteResult evaluate_ate(const Trajectory& est, const Trajectory& gt, bool with_scale = true,
                       double max_dt = 0.02);

/// "timestamp tx ty tz qx qy qz qw" per line; '#' starts a comment. Scale is
/// not stored, so read poses have s = 1.
Trajectory read_tum(const std::filesystem::path& path);
void write_tum(const std::filesystem::path& path, const Trajectory& traj);

/// 12 floats per line, row-major 3x4 [sR | t]; timestamps are the line index
/// times `dt`. A non-unit scale is kept in the rotation block on write and
/// recovered from it on read.
Trajectory read_kitti(const std::filesystem::path& path, double dt = 1.0);
void write_kitti(const std::filesystem::path& path, const Trajectory& traj);

}  // namespace demslam
