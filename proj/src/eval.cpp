#include "demslam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <tuple>

#include "demslam/error.hpp"

namespace demslam {
namespace {

void check_increasing(const Trajectory& traj, const std::string& name) {
  for (std::size_t k = 1; k < traj.size(); ++k) {
    if (!(traj[k].timestamp > traj[k - 1].timestamp)) {
      throw Error(ErrorCode::FormatError, name + ": timestamps not strictly increasing at line " +
                                              std::to_string(k + 1));
    }
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

}  // namespace

std::vector<PosePair> associate(const Trajectory& est, const Trajectory& gt, double max_dt) {
  if (est.empty() || gt.empty()) throw Error(ErrorCode::NoAssociation, "empty trajectory");
  std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
  // Both sides are sorted, so a sliding window bounds the candidate set.
  std::size_t lo = 0;
  for (std::size_t e = 0; e < est.size(); ++e) {
    const double t = est[e].timestamp;
    while (lo < gt.size() && gt[lo].timestamp < t - max_dt) ++lo;
    for (std::size_t g = lo; g < gt.size() && gt[g].timestamp <= t + max_dt; ++g) {
      const double dt = std::abs(gt[g].timestamp - t);
      if (dt <= max_dt) cand.emplace_back(dt, e, g);
    }
  }
  std::sort(cand.begin(), cand.end());
  std::vector<bool> used_e(est.size(), false);
  std::vector<bool> used_g(gt.size(), false);
  std::vector<PosePair> pairs;
  for (const auto& [dt, e, g] : cand) {
    if (used_e[e] || used_g[g]) continue;
    used_e[e] = used_g[g] = true;
    pairs.push_back({e, g, est[e].pose.translation(), gt[g].pose.translation()});
  }
  if (pairs.empty()) {
    throw Error(ErrorCode::NoAssociation, "no timestamp pairs within " + std::to_string(max_dt) +
                                              " s");
  }
  std::sort(pairs.begin(), pairs.end(),
            [](const PosePair& a, const PosePair& b) { return a.est < b.est; });
  return pairs;
}

Sim3 umeyama_align(std::span<const Eigen::Vector3d> est, std::span<const Eigen::Vector3d> gt,
                   bool with_scale) {
  return estimate_relative_sim3(est, gt, {}, with_scale);
}

Sim3 umeyama_align(std::span<const PosePair> pairs, bool with_scale) {
  std::vector<Eigen::Vector3d> est;
  std::vector<Eigen::Vector3d> gt;
  for (const auto& p : pairs) {
    est.push_back(p.est_position);
    gt.push_back(p.gt_position);
  }
  return umeyama_align(est, gt, with_scale);
}

double ate_rmse(std::span<const PosePair> pairs, const Sim3& alignment) {
  if (pairs.empty()) throw Error(ErrorCode::NoAssociation, "no pairs");
  double sum = 0.0;
  for (const auto& p : pairs) sum += (p.gt_position - alignment * p.est_position).squaredNorm();
  return std::sqrt(sum / static_cast<double>(pairs.size()));
}

AteResult evaluate_ate(const Trajectory& est, const Trajectory& gt, bool with_scale,
                       double max_dt) {
  const auto pairs = associate(est, gt, max_dt);
  AteResult r;
  r.alignment = umeyama_align(pairs, with_scale);
  r.rmse = ate_rmse(pairs, r.alignment);
  r.pairs = pairs.size();
  return r;
}

Trajectory read_tum(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  Trajectory traj;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double v[8];
    for (double& x : v) {
      if (!(ss >> x)) {
        throw Error(ErrorCode::FormatError,
                    path.string() + ":" + std::to_string(lineno) + ": expected 8 numbers");
      }
    }
    const Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    if (!(q.norm() > 0.0)) {
      throw Error(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) +
                                              ": zero quaternion");
    }
    traj.push_back({v[0], Sim3(q.normalized(), {v[1], v[2], v[3]}, 1.0)});
  }
  check_increasing(traj, path.string());
  return traj;
}

void write_tum(const std::filesystem::path& path, const Trajectory& traj) {
  auto out = open_out(path);
  for (const auto& s : traj) {
    const auto& t = s.pose.translation();
    const auto& q = s.pose.rotation();
    out << s.timestamp << ' ' << t.x() << ' ' << t.y() << ' ' << t.z() << ' ' << q.x() << ' '
        << q.y() << ' ' << q.z() << ' ' << q.w() << '\n';
  }
}

Trajectory read_kitti(const std::filesystem::path& path, double dt) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  Trajectory traj;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    Eigen::Matrix<double, 3, 4> m;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) {
        if (!(ss >> m(r, c))) {
          throw Error(ErrorCode::FormatError,
                      path.string() + ":" + std::to_string(lineno) + ": expected 12 numbers");
        }
      }
    }
    const Eigen::Matrix3d sR = m.leftCols<3>();
    const double s = std::cbrt(sR.determinant());
    if (!(s > 0.0)) {
      throw Error(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) +
                                              ": rotation block is not a proper similarity");
    }
    traj.push_back({static_cast<double>(traj.size()) * dt, Sim3(Eigen::Matrix3d(sR / s), m.col(3), s)});
  }
  return traj;
}

void write_kitti(const std::filesystem::path& path, const Trajectory& traj) {
  auto out = open_out(path);
  for (const auto& s : traj) {
    const Eigen::Matrix4d m = s.pose.matrix();
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) out << m(r, c) << (r == 2 && c == 3 ? '\n' : ' ');
    }
  }
}

}  // namespace demslam
