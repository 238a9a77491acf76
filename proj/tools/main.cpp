// demslam: command-line driver, one subcommand per pipeline stage.
//
// Exit codes: 0 ok, 1 internal error, 2 user or input error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "demslam/error.hpp"
#include "demslam/eval.hpp"
#include "demslam/pipeline.hpp"
#include "demslam/posegraph.hpp"
#include "demslam/synthetic.hpp"

namespace fs = std::filesystem;
using namespace demslam;

namespace {

struct Globals {
  std::string session{"session"};
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::vector<std::string> sets;
  std::string events;
};

// Stage flags, stored as "key=value" overrides so they share the config
// file's parsing and validation.
struct Flag {
  std::string key;
  std::string value;
  bool given{false};
};

class Overrides {
 public:
  CLI::Option* add(CLI::App* app, const std::string& name, const std::string& key,
                   const std::string& help) {
    auto& f = flags_.emplace_back(std::make_unique<Flag>());
    f->key = key;
    Flag* raw = f.get();
    return app->add_option_function<std::string>(
        name, [raw](const std::string& v) { raw->value = v, raw->given = true; }, help);
  }
  CLI::Option* add_switch(CLI::App* app, const std::string& name, const std::string& key,
                          const std::string& help) {
    auto& f = flags_.emplace_back(std::make_unique<Flag>());
    f->key = key;
    Flag* raw = f.get();
    return app->add_flag_callback(name, [raw] { raw->value = "true", raw->given = true; }, help);
  }
  void apply(PipelineConfig& c) const {
    for (const auto& f : flags_) {
      if (f->given) c.set(f->key, f->value);
    }
  }

 private:
  std::vector<std::unique_ptr<Flag>> flags_;
};

PipelineConfig build_config(const Globals& g, const Overrides& o) {
  PipelineConfig c;
  if (!g.config.empty()) {
    if (!fs::exists(g.config)) throw Error(ErrorCode::IoError, "config " + g.config + " does not exist");
    c = load_config(g.config);
  }
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::ConfigError, "--set expects key=value, got " + kv);
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  o.apply(c);
  if (g.seed) c.seed = *g.seed;
  if (g.jobs) c.jobs = *g.jobs;
  c.validate();
  return c;
}

class Session {
 public:
  Session(const Globals& g, const Overrides& o) : config_(build_config(g, o)) {
    fs::create_directories(g.session);
    const fs::path ev = g.events.empty() ? fs::path(g.session) / "events.jsonl" : fs::path(g.events);
    if (ev != "-") {
      if (ev.has_parent_path()) fs::create_directories(ev.parent_path());
      events_.open(ev, std::ios::app);
      if (!events_) throw Error(ErrorCode::IoError, "cannot open event log " + ev.string());
    }
    pipeline_.emplace(g.session, config_, EventLog(ev == "-" ? &std::cout : &events_, &std::cerr));
  }
  Pipeline& operator*() { return *pipeline_; }
  Pipeline* operator->() { return &*pipeline_; }

 private:
  PipelineConfig config_;
  std::ofstream events_;
  std::optional<Pipeline> pipeline_;
};

void print_ate(const char* label, double v) { std::printf("%s %.6f\n", label, v); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DEM-based loop closure and Sim(3) pose-graph back-end"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  Overrides o;
  app.add_option("--session", g.session, "Session directory holding stage artifacts")
      ->capture_default_str();
  app.add_option("--config", g.config, "INI config file");
  app.add_option("--seed", g.seed, "Root seed for every stage");
  app.add_option("--jobs", g.jobs, "Worker threads for parallel inner loops");
  app.add_option("--set", g.sets, "Config override key=value (repeatable)");
  app.add_option("--events", g.events, "JSON-lines event log ('-' for stdout)");

  std::string manifest;
  auto* ingest = app.add_subcommand("ingest", "Depth-filter and store submaps from a manifest");
  ingest->add_option("--manifest", manifest, "Submap manifest (JSON)")->required();
  o.add(ingest, "--d-min", "ingest.d_min", "Near depth limit, meters");
  o.add(ingest, "--d-max", "ingest.d_max", "Far depth limit, meters");

  auto* dem = app.add_subcommand("dem", "Fit the ground plane and rasterize per-submap DEMs");
  o.add(dem, "--reducer", "dem.reducer", "mean | max | softmax");
  o.add(dem, "--tau", "dem.tau", "Softmax temperature");
  o.add(dem, "--target-px", "dem.target_px_long", "Pixels along the longer grid side");
  o.add(dem, "--tile-px", "dem.tile_px", "Tile side in pixels");
  o.add(dem, "--alpha-edge", "dem.alpha_edge", "Gradient percentile for edge normalization");

  auto* embed = app.add_subcommand("embed", "Compute tile and chip descriptors");
  o.add(embed, "--encoder", "embed.encoder", "builtin | tokens");
  o.add(embed, "--tokens-dir", "embed.tokens_dir", "Directory of precomputed token files");

  auto* index = app.add_subcommand("index", "Build the tile descriptor index");
  o.add(index, "--M", "index.M", "Graph degree");
  o.add(index, "--efc", "index.ef_construction", "Construction beam width");

  auto* query = app.add_subcommand("query", "Search every query chip against earlier submaps");
  o.add(query, "--k", "query.k", "Neighbors per chip");
  o.add(query, "--efs", "query.ef_search", "Search beam width");

  auto* loops = app.add_subcommand("loops", "Select, rerank and verify loop candidates");
  o.add(loops, "--tau-s", "loops.tau_s", "Minimum vote score");
  o.add(loops, "--topk", "loops.top_k", "Candidates kept per query");
  o.add(loops, "--rho", "loops.rho", "Rerank acceptance ratio");

  std::string graph_in;
  std::string truth_in;
  std::string poses_out;
  auto* optimize = app.add_subcommand("optimize", "Optimize the Sim(3) pose graph");
  o.add(optimize, "--max-iters", "optimize.max_iters", "Gauss-Newton iteration cap");
  o.add(optimize, "--tol", "optimize.tol", "Relative cost tolerance");
  o.add(optimize, "--huber", "optimize.huber", "Huber threshold on loop residuals");
  optimize->add_option("--graph", graph_in, "Optimize this pose-graph JSON instead of the session's");
  optimize->add_option("--truth", truth_in, "Ground-truth poses (TUM) for a before/after ATE report");
  optimize->add_option("--out", poses_out, "Output poses (TUM) for --graph");

  std::string est_in;
  std::string gt_in;
  auto* eval = app.add_subcommand("eval", "Absolute trajectory error against ground truth");
  eval->add_option("--est", est_in, "Estimated trajectory (defaults to the optimized one)");
  eval->add_option("--gt", gt_in, "Ground-truth trajectory (TUM)");
  o.add(eval, "--align", "eval.align", "sim3 | se3");
  o.add(eval, "--max-dt", "eval.max_dt", "Association tolerance, seconds");

  auto* render = app.add_subcommand("render", "Render DEM layers and a mosaic to PNG");
  o.add_switch(render, "--hillshade", "render.hillshade", "Shade by surface normal");
  o.add(render, "--colormap", "render.colormap", "gray | terrain");

  std::string scene_in;
  std::string synth_out{"scene"};
  int circle = 0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene or pose-graph fixture");
  synth->add_option("--scene", scene_in, "Scene spec (JSON); defaults when omitted");
  synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
  synth->add_option("--circle", circle, "Write an n-pose circle pose-graph fixture instead")
      ->check(CLI::Range(3, 1000000));

  std::string run_manifest;
  auto* run = app.add_subcommand("run", "ingest through optimize, then eval when eval.gt is set");
  run->add_option("--manifest", run_manifest, "Submap manifest (JSON)")->required();
  run->add_option("--gt", gt_in, "Ground-truth trajectory (TUM)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      const std::uint64_t seed = g.seed.value_or(0);
      if (circle > 0) {
        const auto fx = make_circle_fixture(circle, 10.0, 0.05, 1.0 * std::numbers::pi / 180.0, 0.01, seed);
        fs::create_directories(synth_out);
        save_pose_graph(fs::path(synth_out) / "graph.json", fx.graph);
        write_tum(fs::path(synth_out) / "truth.tum", poses_to_trajectory(fx.truth));
        write_tum(fs::path(synth_out) / "initial.tum", poses_to_trajectory(fx.graph.poses));
        std::cerr << "synth: " << circle << "-pose circle fixture in " << synth_out << '\n';
        return 0;
      }
      if (!scene_in.empty() && !fs::exists(scene_in)) {
        throw Error(ErrorCode::IoError, "scene spec " + scene_in + " does not exist");
      }
      const SceneSpec spec = scene_in.empty() ? SceneSpec{} : load_scene_spec(scene_in);
      const SyntheticScene scene = generate_scene(spec, seed);
      write_scene(synth_out, scene);
      std::cerr << "synth: " << scene.submaps.size() << " submaps, " << scene.ground_truth.size()
                << " ground-truth poses in " << synth_out << '\n';
      return 0;
    }

    if (optimize->parsed() && !graph_in.empty()) {
      const PipelineConfig c = build_config(g, o);
      if (!fs::exists(graph_in)) throw Error(ErrorCode::IoError, "pose graph " + graph_in + " does not exist");
      const auto t0 = std::chrono::steady_clock::now();
      const OptimizeResult res = optimize_graph_file(graph_in, c.optimize, poses_out);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("ITERATIONS %d\nCOST %.6g -> %.6g\nTIME %.3f\n", res.report.iterations,
                  res.report.initial_cost, res.report.final_cost, secs);
      if (!truth_in.empty()) {
        if (!fs::exists(truth_in)) throw Error(ErrorCode::IoError, "truth " + truth_in + " does not exist");
        const Trajectory truth = read_tum(truth_in);
        const PoseGraph graph = load_pose_graph(graph_in);
        const double pre = evaluate_ate(poses_to_trajectory(graph.poses), truth, c.eval.with_scale, 0.5).rmse;
        const double post = evaluate_ate(poses_to_trajectory(res.poses), truth, c.eval.with_scale, 0.5).rmse;
        print_ate("PRE_ATE_RMSE", pre);
        print_ate("POST_ATE_RMSE", post);
      }
      return 0;
    }

    Session s(g, o);
    if (ingest->parsed()) {
      const auto rows = s->ingest(manifest);
      std::cerr << "ingest: " << rows.size() << " submaps\n";
    } else if (dem->parsed()) {
      s->dem();
    } else if (embed->parsed()) {
      s->embed();
    } else if (index->parsed()) {
      s->index();
    } else if (query->parsed()) {
      s->query();
    } else if (loops->parsed()) {
      s->loops();
    } else if (optimize->parsed()) {
      s->optimize();
    } else if (eval->parsed()) {
      const EvalSummary r = s->eval(est_in, gt_in);
      print_ate("ATE_RMSE", r.optimized.rmse);
      if (r.odometry) print_ate("ODOMETRY_ATE_RMSE", r.odometry->rmse);
    } else if (render->parsed()) {
      s->render();
    } else if (run->parsed()) {
      s->run(run_manifest);
      if (!gt_in.empty()) {
        const EvalSummary r = s->eval({}, gt_in);
        print_ate("ATE_RMSE", r.optimized.rmse);
        if (r.odometry) print_ate("ODOMETRY_ATE_RMSE", r.odometry->rmse);
      }
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';  // what() leads with the code name
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
}
