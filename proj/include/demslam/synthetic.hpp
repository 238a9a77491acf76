#pragma once

// Procedural test scenes: a terrain heightfield observed along a drifting
// figure-eight, and a small circular pose-graph fixture.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "demslam/eval.hpp"
#include "demslam/geometry.hpp"
#include "demslam/io.hpp"
#include "demslam/posegraph.hpp"

namespace demslam {

struct Range {
  double lo{0.0};
  double hi{0.0};
};

struct TerrainSpec {
  double undulation{3.0};
  double wavelength{40.0};
  int bumps{200};
  Range bump_height{0.5, 2.5};
  Range bump_sigma{1.0, 4.0};
  int blocks{60};
  Range block_height{0.3, 1.0};
  Range block_size{0.8, 2.5};
};

struct SceneSpec {
  double lemniscate_a{30.0};
  int laps{2};
  /// Where the path starts, as a fraction of one lap (0 is the crossing).
  double start_fraction{0.0};
  /// Lateral shift of each later lap, meters.
  double lap_offset{0.6};
  double camera_height{1.5};
  double submap_length{10.0};
  int frames_per_submap{8};
  double view_radius{4.5};
  double frame_dt{0.1};
  double point_spacing{0.1};
  double point_noise{0.005};
  int floaters_per_frame{15};
  Range floater_range{40.0, 80.0};
  TerrainSpec terrain;
  double sigma_t{0.05};
  double sigma_phi_deg{0.5};
  double sigma_scale{0.005};

  void validate() const;
};

/// Reads a JSON scene spec; missing keys keep their defaults, unknown keys
/// are rejected.
SceneSpec load_scene_spec(const std::filesystem::path& path);
void save_scene_spec(const std::filesystem::path& path, const SceneSpec& spec);

class Terrain {
 public:
  Terrain(const TerrainSpec& spec, const Bounds& extent, std::uint64_t seed);
  [[nodiscard]] double height(double x, double y) const;

 private:
  struct Bump {
    double x, y, h, sigma;
  };
  struct Block {
    double x, y, c, s, hx, hy, h;
  };
  TerrainSpec spec_;
  double phase_x_{0.0};
  double phase_y_{0.0};
  std::vector<Bump> bumps_;
  std::vector<Block> blocks_;
};

struct SyntheticSubmap {
  Submap estimated;      // drifting poses; cloud in the drifting world frame
  Sim3 true_pose;        // world <- submap
  PointCloud true_cloud;  // terrain samples only, true world frame
};

struct SyntheticScene {
  std::vector<SyntheticSubmap> submaps;
  Trajectory ground_truth;  // one sample per unique frame
};

SyntheticScene generate_scene(const SceneSpec& spec, std::uint64_t seed);

/// Writes clouds (PLY), manifest.json, gt_trajectory.tum and
/// gt_submaps.json (true submap poses) into `dir`.
void write_scene(const std::filesystem::path& dir, const SyntheticScene& scene);

/// |occ(a) ∩ occ(b)| / |occ(a)| over cells of side `cell` in the true XY
/// plane.
double footprint_overlap(const PointCloud& a, const PointCloud& b, double cell = 0.5);

struct CircleFixture {
  PoseGraph graph;
  std::map<PoseId, Sim3> truth;
};

/// n poses on a circle of the given radius, odometry edges perturbed as
/// A * exp(xi), one exact loop edge from the last pose back to the first.
CircleFixture make_circle_fixture(int n, double radius, double sigma_t, double sigma_phi_rad,
                                  double sigma_scale, std::uint64_t seed);

/// Poses of a graph as a trajectory with timestamps equal to the ids.
Trajectory poses_to_trajectory(const std::map<PoseId, Sim3>& poses);

}  // namespace demslam
