#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "demslam/random.hpp"
#include "demslam/sim3.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("demslam_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Eigen::Vector3d random_vec(demslam::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

/// Random similarity with rotation angle below max_angle.
inline demslam::Sim3 random_sim3(demslam::Rng& rng, double max_angle = 3.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::Vector3d axis = random_vec(rng);
  while (axis.norm() < 1e-3) axis = random_vec(rng);
  const double angle = max_angle * u(rng);
  demslam::Tangent7 xi;
  xi << random_vec(rng, -5.0, 5.0), axis.normalized() * angle, (u(rng) - 0.5) * 2.0;
  return demslam::sim3_exp(xi);
}

}  // namespace testutil
