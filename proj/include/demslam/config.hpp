#pragma once

// Pipeline configuration: INI-style sections of key = value pairs, with
// command-line overrides applied through the same dotted keys.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "demslam/ann.hpp"
#include "demslam/covis.hpp"
#include "demslam/dem.hpp"
#include "demslam/descriptor.hpp"
#include "demslam/geometry.hpp"
#include "demslam/posegraph.hpp"

namespace demslam {

struct IngestConfig {
  double d_min{0.1};
  double d_max{30.0};
  /// Measure range from each point's source-frame camera center when tags
  /// exist; otherwise from the world origin.
  bool per_frame{true};
};

struct PlaneConfig {
  int iterations{500};
  double inlier_thresh{0.05};
  bool confidence_weighted{false};
  /// Deterministic stride subsample used for the RANSAC fit.
  int max_points{60000};
};

struct EmbedConfig {
  EncoderSpec encoder{};
  std::string tokens_dir;
  int nbhd{9};
};

struct QueryConfig {
  int k{10};
  int ef_search{128};
};

struct LoopConfig {
  SelectParams select{};
  double rho{0.8};
  int k_prime{5};
  InformationParams info{};
  /// Geometric verification gate on the refined alignment.
  double max_rms{0.12};
  double min_overlap{0.5};
  /// Accepted candidates per query sent to verification, best rerank first.
  int verify_top{3};
  int icp_iterations{15};
  int icp_points{1000};
  /// Largest |log s| accepted from the scale refinement after rigid ICP.
  double max_log_scale{0.05};
};

struct OdometryConfig {
  double sigma_t{0.05};
  double sigma_phi_deg{0.5};
  double sigma_scale{0.005};
};

struct EvalConfig {
  std::string gt;
  bool with_scale{true};
  double max_dt{0.02};
};

struct RenderConfig {
  bool hillshade{false};
  std::string colormap{"gray"};
};

struct PipelineConfig {
  std::uint64_t seed{0};
  int jobs{1};
  IngestConfig ingest;
  PlaneConfig plane;
  DemParams dem{};
  EmbedConfig embed;
  IndexParams index;
  QueryConfig query;
  LoopConfig loops;
  OdometryConfig odometry;
  OptimizerParams optimize;
  EvalConfig eval;
  RenderConfig render;

  /// Sets "section.key" from text. Throws ConfigError for unknown keys or
  /// unparsable values.
  void set(const std::string& dotted_key, const std::string& value);
  [[nodiscard]] std::string get(const std::string& dotted_key) const;
  [[nodiscard]] static std::vector<std::string> keys();

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;

  /// Every key = value in a fixed order, for hashing and reports.
  [[nodiscard]] std::string canonical() const;
};

/// Reads an INI file onto `base`; unknown sections or keys are rejected.
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {});

}  // namespace demslam
