#pragma once

// Stage driver over a session directory. Each stage reads the artifacts of
// its predecessors, writes its own, and leaves a stamp.json behind so that
// later stages can check their dependencies.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "demslam/config.hpp"
#include "demslam/covis.hpp"
#include "demslam/eval.hpp"
#include "demslam/posegraph.hpp"

namespace demslam {

/// One-JSON-object-per-line event sink plus human-readable text.
class EventLog {
 public:
  EventLog() = default;
  EventLog(std::ostream* json, std::ostream* text) : json_(json), text_(text) {}

  void event(const std::string& stage, const std::string& name,
             const std::map<std::string, std::string>& fields = {});
  void info(const std::string& message);
  void warn(const std::string& message);

 private:
  std::ostream* json_{nullptr};
  std::ostream* text_{nullptr};
};

struct IngestRow {
  std::int64_t id{0};
  std::size_t points_in{0};
  std::size_t points_out{0};
};

/// Ranked outcome of one query submap: candidates ordered by rerank score.
struct QueryOutcome {
  SubmapId query{0};
  std::vector<LoopCandidate> ranked;
};

struct LoopVerification {
  SubmapId query{0};
  SubmapId neighbor{0};
  double rms{0.0};
  double overlap{0.0};
  bool passed{false};
};

struct LoopsSummary {
  std::vector<QueryOutcome> queries;
  std::vector<LoopVerification> verifications;
  std::size_t loop_edges{0};
};

struct OptimizeSummary {
  OptimizerReport report;
  std::size_t poses{0};
  std::size_t loop_edges{0};
};

struct EvalSummary {
  AteResult optimized;
  std::optional<AteResult> odometry;
};

class Pipeline {
 public:
  Pipeline(std::filesystem::path session, PipelineConfig config, EventLog log = {});

  [[nodiscard]] const std::filesystem::path& session() const noexcept { return session_; }
  [[nodiscard]] const PipelineConfig& config() const noexcept { return config_; }

  std::vector<IngestRow> ingest(const std::filesystem::path& manifest);
  void dem();
  void embed();
  void index();
  void query();
  LoopsSummary loops();
  OptimizeSummary optimize();
  /// `est` defaults to the optimized trajectory, `gt` to config().eval.gt.
  EvalSummary eval(const std::filesystem::path& est = {}, const std::filesystem::path& gt = {});
  void render();

  /// ingest through optimize, then eval when a ground truth is configured.
  void run(const std::filesystem::path& manifest);

  /// Artifact paths, relative to the session root.
  static constexpr const char* kTrajectoryOpt = "optimize/trajectory_opt.tum";
  static constexpr const char* kTrajectoryOdom = "optimize/trajectory_odom.tum";
  static constexpr const char* kPoseGraph = "loops/pose_graph.json";

 private:
  [[nodiscard]] std::filesystem::path path(const std::string& rel) const { return session_ / rel; }
  void require(const std::string& stage) const;
  void stamp(const std::string& stage, const std::map<std::string, std::string>& extra = {}) const;

  std::filesystem::path session_;
  PipelineConfig config_;
  EventLog log_;
};

/// Standalone pose-graph optimization; writes poses (timestamps = ids) as TUM.
OptimizeResult optimize_graph_file(const std::filesystem::path& graph_path,
                                   const OptimizerParams& params,
                                   const std::filesystem::path& poses_out);

}  // namespace demslam
