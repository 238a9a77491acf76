#pragma once

// Sim(3) pose graph over submaps and its Gauss-Newton solver.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "demslam/sim3.hpp"

namespace demslam {

using PoseId = std::uint32_t;

enum class EdgeType { Odometry, Loop };

/// measurement maps submap-j coordinates into submap-i coordinates, so the
/// residual vanishes when measurement = T_i^-1 * T_j.
struct PoseEdge {
  PoseId i{0};
  PoseId j{0};
  EdgeType type{EdgeType::Odometry};
  Sim3 measurement;
  Matrix7d information{Matrix7d::Identity()};
};

struct PoseGraph {
  std::map<PoseId, Sim3> poses;  // world <- submap
  std::vector<PoseEdge> edges;
  PoseId anchor{0};
};

/// log(T_j^-1 * T_i * T_hat).
Tangent7 edge_residual(const Sim3& T_i, const Sim3& T_j, const Sim3& T_hat);

/// Derivatives of edge_residual under right perturbations T <- T * exp(d).
struct EdgeJacobians {
  Matrix7d d_i;
  Matrix7d d_j;
};
EdgeJacobians edge_jacobians(const Sim3& T_i, const Sim3& T_j, const Sim3& T_hat);

struct InformationParams {
  double kappa{100.0};
  double epsilon{0.01};
};

/// kappa * clamp(rerank_score, eps, 1) / (rms^2 + eps^2) * I. The vote score
/// is carried for logging and does not enter the weight.
Matrix7d edge_information(double vote_score, double rerank_score, double alignment_rms,
                          const InformationParams& params = {});

/// Diagonal information from per-component standard deviations.
Matrix7d odometry_information(double sigma_t, double sigma_phi_rad, double sigma_scale);

struct OptimizerParams {
  int max_iters{50};
  double tol{1e-8};
  /// Huber threshold on whitened loop residuals; <= 0 disables it.
  double huber_delta{1.0};
  int dense_threshold{300};
  int max_halvings{12};
};

struct IterationStat {
  int iter{0};
  double cost{0.0};
  double max_step{0.0};
};

struct OptimizerReport {
  double initial_cost{0.0};
  double final_cost{0.0};
  int iterations{0};
  bool converged{false};
  bool sparse_solver{false};
  std::vector<IterationStat> history;
};

struct OptimizeResult {
  std::map<PoseId, Sim3> poses;
  OptimizerReport report;
};

/// Total robustified cost sum rho(r^T Omega r) at the given poses.
double graph_cost(const PoseGraph& graph, const std::map<PoseId, Sim3>& poses,
                  double huber_delta);

/// Throws DisconnectedGraph when a pose is unreachable from the anchor or an
/// edge names a missing pose; SingularSystem when the gauge-fixed normal
/// equations cannot be factored.
OptimizeResult optimize_pose_graph(const PoseGraph& graph, const OptimizerParams& params = {});

void save_pose_graph(const std::filesystem::path& path, const PoseGraph& graph);
PoseGraph load_pose_graph(const std::filesystem::path& path);
void write_optimizer_report(const std::filesystem::path& path, const OptimizerReport& report);

/// Latest optimized poses, swapped in as a whole so readers never observe a
/// partially updated set.
class PoseStore {
 public:
  using Snapshot = std::shared_ptr<const std::map<PoseId, Sim3>>;

  void publish(std::map<PoseId, Sim3> poses);
  [[nodiscard]] Snapshot snapshot() const;

 private:
  mutable std::mutex mutex_;
  Snapshot current_{std::make_shared<const std::map<PoseId, Sim3>>()};
};

}  // namespace demslam
