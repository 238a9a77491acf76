#include "demslam/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "demslam/error.hpp"
#include "demslam/random.hpp"

namespace demslam {
namespace {

using nlohmann::json;

double uniform(Rng& rng, const Range& r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

Tangent7 draw_noise(Rng& rng, double sigma_t, double sigma_phi, double sigma_s) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Tangent7 xi;
  for (int k = 0; k < 3; ++k) xi(k) = sigma_t * n01(rng);
  for (int k = 3; k < 6; ++k) xi(k) = sigma_phi * n01(rng);
  xi(6) = sigma_s * n01(rng);
  return xi;
}

// Dense arc-length table of one lap of the lemniscate of Gerono,
// x = a sin t, y = a sin t cos t, which crosses itself at the origin.
struct Lemniscate {
  double a;
  std::vector<double> t;
  std::vector<double> s;

  explicit Lemniscate(double a_) : a(a_) {
    const int n = 20000;
    t.resize(n + 1);
    s.resize(n + 1);
    Eigen::Vector2d prev = point(0.0);
    for (int k = 0; k <= n; ++k) {
      t[k] = 2.0 * std::numbers::pi * k / n;
      const Eigen::Vector2d p = point(t[k]);
      s[k] = k == 0 ? 0.0 : s[k - 1] + (p - prev).norm();
      prev = p;
    }
  }
  [[nodiscard]] double length() const { return s.back(); }
  [[nodiscard]] Eigen::Vector2d point(double tt) const {
    return {a * std::sin(tt), a * std::sin(tt) * std::cos(tt)};
  }
  [[nodiscard]] Eigen::Vector2d tangent(double tt) const {
    return Eigen::Vector2d(a * std::cos(tt), a * std::cos(2.0 * tt)).normalized();
  }
  [[nodiscard]] double param_at(double arc) const {
    arc = std::fmod(arc, length());
    if (arc < 0) arc += length();
    const auto it = std::lower_bound(s.begin(), s.end(), arc);
    const auto k = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, it - s.begin()));
    const double f = (arc - s[k - 1]) / std::max(1e-15, s[k] - s[k - 1]);
    return t[k - 1] + f * (t[k] - t[k - 1]);
  }
};

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) throw Error(ErrorCode::ConfigError, "unknown scene key " + where + k);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_range(const json& j, const char* key, Range& r) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 2) throw Error(ErrorCode::ConfigError, std::string("range ") + key + " needs 2 values");
  r = {v[0], v[1]};
}

}  // namespace

void SceneSpec::validate() const {
  const auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigError, "scene: " + m); };
  if (!(lemniscate_a > 0.0)) fail("lemniscate_a must be positive");
  if (laps < 1) fail("laps must be >= 1");
  if (!(start_fraction >= 0.0 && start_fraction < 1.0)) fail("start_fraction must be in [0, 1)");
  if (!(submap_length > 0.0)) fail("submap_length must be positive");
  if (frames_per_submap < 2) fail("frames_per_submap must be >= 2");
  if (!(view_radius > 0.0)) fail("view_radius must be positive");
  if (!(frame_dt > 0.0)) fail("frame_dt must be positive");
  if (!(point_spacing > 0.0)) fail("point_spacing must be positive");
  if (point_noise < 0.0 || sigma_t < 0.0 || sigma_phi_deg < 0.0 || sigma_scale < 0.0) {
    fail("noise levels must be non-negative");
  }
  if (floaters_per_frame < 0 || !(floater_range.lo > 0.0 && floater_range.lo <= floater_range.hi)) {
    fail("bad floater settings");
  }
}

SceneSpec load_scene_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open scene spec " + path.string());
  SceneSpec s;
  try {
    const auto j = json::parse(in);
    check_keys(j, {"trajectory", "submaps", "sampling", "terrain", "noise"}, "");
    if (j.contains("trajectory")) {
      const auto& t = j.at("trajectory");
      check_keys(t, {"shape", "a", "laps", "start_fraction", "lap_offset", "camera_height"},
                 "trajectory.");
      if (t.contains("shape") && t.at("shape").get<std::string>() != "figure8") {
        throw Error(ErrorCode::ConfigError, "only the figure8 trajectory shape is supported");
      }
      read_opt(t, "a", s.lemniscate_a);
      read_opt(t, "laps", s.laps);
      read_opt(t, "start_fraction", s.start_fraction);
      read_opt(t, "lap_offset", s.lap_offset);
      read_opt(t, "camera_height", s.camera_height);
    }
    if (j.contains("submaps")) {
      const auto& t = j.at("submaps");
      check_keys(t, {"length", "frames", "view_radius", "frame_dt"}, "submaps.");
      read_opt(t, "length", s.submap_length);
      read_opt(t, "frames", s.frames_per_submap);
      read_opt(t, "view_radius", s.view_radius);
      read_opt(t, "frame_dt", s.frame_dt);
    }
    if (j.contains("sampling")) {
      const auto& t = j.at("sampling");
      check_keys(t, {"spacing", "noise", "floaters_per_frame", "floater_range"}, "sampling.");
      read_opt(t, "spacing", s.point_spacing);
      read_opt(t, "noise", s.point_noise);
      read_opt(t, "floaters_per_frame", s.floaters_per_frame);
      read_range(t, "floater_range", s.floater_range);
    }
    if (j.contains("terrain")) {
      const auto& t = j.at("terrain");
      check_keys(t, {"undulation", "wavelength", "bumps", "bump_height", "bump_sigma", "blocks",
                     "block_height", "block_size"},
                 "terrain.");
      read_opt(t, "undulation", s.terrain.undulation);
      read_opt(t, "wavelength", s.terrain.wavelength);
      read_opt(t, "bumps", s.terrain.bumps);
      read_range(t, "bump_height", s.terrain.bump_height);
      read_range(t, "bump_sigma", s.terrain.bump_sigma);
      read_opt(t, "blocks", s.terrain.blocks);
      read_range(t, "block_height", s.terrain.block_height);
      read_range(t, "block_size", s.terrain.block_size);
    }
    if (j.contains("noise")) {
      const auto& t = j.at("noise");
      check_keys(t, {"sigma_t", "sigma_phi_deg", "sigma_scale"}, "noise.");
      read_opt(t, "sigma_t", s.sigma_t);
      read_opt(t, "sigma_phi_deg", s.sigma_phi_deg);
      read_opt(t, "sigma_scale", s.sigma_scale);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  s.validate();
  return s;
}

void save_scene_spec(const std::filesystem::path& path, const SceneSpec& s) {
  nlohmann::ordered_json j;
  j["trajectory"] = {{"shape", "figure8"},
                     {"a", s.lemniscate_a},
                     {"laps", s.laps},
                     {"start_fraction", s.start_fraction},
                     {"lap_offset", s.lap_offset},
                     {"camera_height", s.camera_height}};
  j["submaps"] = {{"length", s.submap_length},
                  {"frames", s.frames_per_submap},
                  {"view_radius", s.view_radius},
                  {"frame_dt", s.frame_dt}};
  j["sampling"] = {{"spacing", s.point_spacing},
                   {"noise", s.point_noise},
                   {"floaters_per_frame", s.floaters_per_frame},
                   {"floater_range", {s.floater_range.lo, s.floater_range.hi}}};
  const auto& t = s.terrain;
  j["terrain"] = {{"undulation", t.undulation},
                  {"wavelength", t.wavelength},
                  {"bumps", t.bumps},
                  {"bump_height", {t.bump_height.lo, t.bump_height.hi}},
                  {"bump_sigma", {t.bump_sigma.lo, t.bump_sigma.hi}},
                  {"blocks", t.blocks},
                  {"block_height", {t.block_height.lo, t.block_height.hi}},
                  {"block_size", {t.block_size.lo, t.block_size.hi}}};
  j["noise"] = {{"sigma_t", s.sigma_t},
                {"sigma_phi_deg", s.sigma_phi_deg},
                {"sigma_scale", s.sigma_scale}};
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Terrain::Terrain(const TerrainSpec& spec, const Bounds& extent, std::uint64_t seed) : spec_(spec) {
  Rng rng(derive_seed(seed, "terrain"));
  const Range ux{extent.u0, extent.u1};
  const Range vy{extent.v0, extent.v1};
  phase_x_ = uniform(rng, {0.0, 2.0 * std::numbers::pi});
  phase_y_ = uniform(rng, {0.0, 2.0 * std::numbers::pi});
  for (int k = 0; k < spec.bumps; ++k) {
    Bump b{};
    b.x = uniform(rng, ux);
    b.y = uniform(rng, vy);
    b.h = uniform(rng, spec.bump_height);
    b.sigma = uniform(rng, spec.bump_sigma);
    bumps_.push_back(b);
  }
  for (int k = 0; k < spec.blocks; ++k) {
    Block b{};
    b.x = uniform(rng, ux);
    b.y = uniform(rng, vy);
    const double yaw = uniform(rng, {0.0, std::numbers::pi});
    b.c = std::cos(yaw);
    b.s = std::sin(yaw);
    b.hx = 0.5 * uniform(rng, spec.block_size);
    b.hy = 0.5 * uniform(rng, spec.block_size);
    b.h = uniform(rng, spec.block_height);
    blocks_.push_back(b);
  }
}

double Terrain::height(double x, double y) const {
  const double w = 2.0 * std::numbers::pi / spec_.wavelength;
  double h = spec_.undulation * std::sin(w * x + phase_x_) * std::cos(0.8 * w * y + phase_y_);
  for (const auto& b : bumps_) {
    const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
    if (d2 < 16.0 * b.sigma * b.sigma) h += b.h * std::exp(-0.5 * d2 / (b.sigma * b.sigma));
  }
  // Blocks do not stack; the tallest one covering the point wins.
  double block = 0.0;
  for (const auto& b : blocks_) {
    const double dx = x - b.x;
    const double dy = y - b.y;
    const double lx = b.c * dx + b.s * dy;
    const double ly = -b.s * dx + b.c * dy;
    if (std::abs(lx) <= b.hx && std::abs(ly) <= b.hy) block = std::max(block, b.h);
  }
  return h + block;
}

SyntheticScene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Lemniscate path(spec.lemniscate_a);
  const double lap_len = path.length();
  const int submaps_per_lap = static_cast<int>(std::floor(lap_len / spec.submap_length));
  const int n_submaps = submaps_per_lap * spec.laps;
  const int F = spec.frames_per_submap;

  const double margin = spec.view_radius + 2.0 + spec.lap_offset * spec.laps;
  const Bounds extent{-spec.lemniscate_a - margin, spec.lemniscate_a + margin,
                      -0.5 * spec.lemniscate_a - margin, 0.5 * spec.lemniscate_a + margin};
  const Terrain terrain(spec.terrain, extent, seed);

  // True pose of the frame at arc length `arc`; later laps shift sideways.
  const auto true_frame_pose = [&](double arc) {
    const int lap = static_cast<int>(std::floor(arc / lap_len));
    const double tt = path.param_at(arc + spec.start_fraction * lap_len);
    const Eigen::Vector2d tan = path.tangent(tt);
    const Eigen::Vector2d normal(-tan.y(), tan.x());
    const Eigen::Vector2d xy = path.point(tt) + lap * spec.lap_offset * normal;
    const double yaw = std::atan2(tan.y(), tan.x());
    const Eigen::Vector3d pos(xy.x(), xy.y(), terrain.height(xy.x(), xy.y()) + spec.camera_height);
    return Sim3(Eigen::Quaterniond(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ())), pos, 1.0);
  };

  SyntheticScene scene;
  Rng odo_rng(derive_seed(seed, "odometry"));
  const double step = spec.submap_length / (F - 1);
  const double cell_area = spec.point_spacing * spec.point_spacing;
  const int per_frame =
      static_cast<int>(std::lround(std::numbers::pi * spec.view_radius * spec.view_radius / cell_area));

  Sim3 est_pose;  // world <- submap, drifting
  for (int k = 0; k < n_submaps; ++k) {
    SyntheticSubmap sm;
    std::vector<Sim3> truth(F);
    for (int f = 0; f < F; ++f) truth[f] = true_frame_pose(k * spec.submap_length + f * step);
    sm.true_pose = truth[0];
    if (k == 0) est_pose = truth[0];
    const Sim3 true_inv = sm.true_pose.inverse();

    // Relative motion to the next submap's first frame, seen through the
    // noisy front-end; the last frame carries that estimate.
    const Sim3 rel_true = true_inv * truth[F - 1];
    const Sim3 rel_est =
        rel_true * sim3_exp(draw_noise(odo_rng, spec.sigma_t, spec.sigma_phi_deg * std::numbers::pi / 180.0,
                                       spec.sigma_scale));

    sm.estimated.id = k;
    if (k > 0) sm.estimated.transition_frame = 0;
    for (int f = 0; f < F; ++f) {
      const int global = k * (F - 1) + f;
      const Sim3 local = f == F - 1 ? rel_est : true_inv * truth[f];
      sm.estimated.frames.push_back({global * spec.frame_dt, est_pose * local});
    }

    const Sim3 to_est = est_pose * true_inv;
    Rng pts_rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spec.point_noise);
    for (int f = 0; f < F; ++f) {
      const Eigen::Vector3d c = truth[f].translation();
      for (int p = 0; p < per_frame; ++p) {
        const double r = spec.view_radius * std::sqrt(unit(pts_rng));
        const double th = 2.0 * std::numbers::pi * unit(pts_rng);
        const double x = c.x() + r * std::cos(th);
        const double y = c.y() + r * std::sin(th);
        const Eigen::Vector3d w(x, y, terrain.height(x, y) + noise(pts_rng));
        sm.true_cloud.points.push_back(w);
        sm.estimated.cloud.points.push_back(to_est * w);
        sm.estimated.cloud.confidence.push_back(static_cast<float>(0.6 + 0.4 * unit(pts_rng)));
        sm.estimated.cloud.source_frame.push_back(static_cast<std::uint32_t>(f));
      }
      for (int p = 0; p < spec.floaters_per_frame; ++p) {
        const double d = uniform(pts_rng, spec.floater_range);
        const double az = 2.0 * std::numbers::pi * unit(pts_rng);
        const double el = 0.5 * std::numbers::pi * unit(pts_rng);
        const Eigen::Vector3d w =
            c + d * Eigen::Vector3d(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
        sm.estimated.cloud.points.push_back(to_est * w);
        sm.estimated.cloud.confidence.push_back(static_cast<float>(0.2 * unit(pts_rng)));
        sm.estimated.cloud.source_frame.push_back(static_cast<std::uint32_t>(f));
      }
    }
    for (int f = 0; f < F; ++f) {
      if (k > 0 && f == 0) continue;  // shared with the previous submap
      scene.ground_truth.push_back({(k * (F - 1) + f) * spec.frame_dt, truth[f]});
    }
    scene.submaps.push_back(std::move(sm));
    est_pose = est_pose * rel_est;
  }
  return scene;
}

void write_scene(const std::filesystem::path& dir, const SyntheticScene& scene) {
  std::filesystem::create_directories(dir / "clouds");
  Manifest manifest;
  nlohmann::ordered_json gt_submaps = nlohmann::ordered_json::array();
  for (const auto& sm : scene.submaps) {
    char name[32];
    std::snprintf(name, sizeof(name), "submap_%04lld.ply", static_cast<long long>(sm.estimated.id));
    const auto cloud_path = dir / "clouds" / name;
    write_ply(cloud_path, sm.estimated.cloud);
    manifest.submaps.push_back(
        {sm.estimated.id, cloud_path, sm.estimated.transition_frame, sm.estimated.frames});
    const auto& q = sm.true_pose.rotation();
    const auto& t = sm.true_pose.translation();
    gt_submaps.push_back({{"id", sm.estimated.id},
                          {"q", {q.w(), q.x(), q.y(), q.z()}},
                          {"t", {t.x(), t.y(), t.z()}},
                          {"s", sm.true_pose.scale()}});
  }
  write_manifest(dir / "manifest.json", manifest, dir);
  write_tum(dir / "gt_trajectory.tum", scene.ground_truth);
  std::ofstream out(dir / "gt_submaps.json");
  if (!out) throw Error(ErrorCode::IoError, "cannot write gt_submaps.json");
  out << gt_submaps.dump(1) << '\n';
}

double footprint_overlap(const PointCloud& a, const PointCloud& b, double cell) {
  const auto key = [cell](const Point3& p) {
    const auto ix = static_cast<std::int64_t>(std::floor(p.x() / cell));
    const auto iy = static_cast<std::int64_t>(std::floor(p.y() / cell));
    return static_cast<std::uint64_t>(ix * 73856093) ^ static_cast<std::uint64_t>(iy * 19349663) ^
           (static_cast<std::uint64_t>(ix & 0xFFFFF) << 40);
  };
  std::unordered_set<std::uint64_t> occ_a;
  std::unordered_set<std::uint64_t> occ_b;
  for (const auto& p : a.points) occ_a.insert(key(p));
  for (const auto& p : b.points) occ_b.insert(key(p));
  if (occ_a.empty()) return 0.0;
  std::size_t shared = 0;
  for (auto k : occ_a) shared += occ_b.contains(k) ? 1 : 0;
  return static_cast<double>(shared) / static_cast<double>(occ_a.size());
}

CircleFixture make_circle_fixture(int n, double radius, double sigma_t, double sigma_phi_rad,
                                  double sigma_scale, std::uint64_t seed) {
  if (n < 3) throw Error(ErrorCode::ConfigError, "circle fixture needs >= 3 poses");
  CircleFixture fx;
  for (int k = 0; k < n; ++k) {
    const double th = 2.0 * std::numbers::pi * k / n;
    const Eigen::Quaterniond q(Eigen::AngleAxisd(th + 0.5 * std::numbers::pi, Eigen::Vector3d::UnitZ()));
    fx.truth[static_cast<PoseId>(k)] = Sim3(q, {radius * std::cos(th), radius * std::sin(th), 0.0}, 1.0);
  }
  Rng rng(derive_seed(seed, "circle"));
  const Matrix7d odo_info = odometry_information(sigma_t, sigma_phi_rad, sigma_scale);
  fx.graph.anchor = 0;
  fx.graph.poses[0] = fx.truth[0];
  for (int k = 1; k < n; ++k) {
    const auto i = static_cast<PoseId>(k - 1);
    const auto j = static_cast<PoseId>(k);
    const Sim3 meas = fx.truth[i].inverse() * fx.truth[j] *
                      sim3_exp(draw_noise(rng, sigma_t, sigma_phi_rad, sigma_scale));
    fx.graph.edges.push_back({i, j, EdgeType::Odometry, meas, odo_info});
    fx.graph.poses[j] = fx.graph.poses[i] * meas;
  }
  const auto last = static_cast<PoseId>(n - 1);
  fx.graph.edges.push_back({last, 0, EdgeType::Loop, fx.truth[last].inverse() * fx.truth[0],
                            edge_information(1.0, 1.0, 0.0)});
  return fx;
}

Trajectory poses_to_trajectory(const std::map<PoseId, Sim3>& poses) {
  Trajectory traj;
  for (const auto& [id, T] : poses) traj.push_back({static_cast<double>(id), T});
  return traj;
}

}  // namespace demslam
