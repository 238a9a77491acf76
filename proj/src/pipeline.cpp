#include "demslam/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "demslam/ann.hpp"
#include "demslam/descriptor.hpp"
#include "demslam/dem.hpp"
#include "demslam/error.hpp"
#include "demslam/io.hpp"
#include "demslam/parallel.hpp"
#include "demslam/random.hpp"
#include "demslam/registration.hpp"
#include "demslam/synthetic.hpp"

namespace demslam {
namespace fs = std::filesystem;
using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

std::string submap_name(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "submap_%04lld", static_cast<long long>(id));
  return buf;
}

std::string tile_name(TileIndex t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "tile_%03d_%03d", t.u, t.v);
  return buf;
}

std::string num(double x) {
  std::ostringstream ss;
  ss << std::setprecision(17) << x;
  return ss.str();
}

void write_json(const fs::path& p, const ojson& j) {
  std::ofstream out(p);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + p.string());
  out << j.dump(1) << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::DependencyError, "missing artifact " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, p.string() + ": " + e.what());
  }
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + p.string());
  out << std::setprecision(17);
  return out;
}

SubmapId checked_submap_id(std::int64_t id) {
  if (id < 0 || id > 0xFFFFFFFFLL) {
    throw Error(ErrorCode::FormatError, "submap id " + std::to_string(id) + " outside [0, 2^32)");
  }
  return static_cast<SubmapId>(id);
}

// Shared grid geometry written by the dem stage.
struct GridInfo {
  double mpp{1.0};
  Bounds bounds;
  int width_px{0};
  int height_px{0};
  int tile_px{1};
  HeightRange range;
  std::vector<std::int64_t> layers;  // submaps with a non-empty layer

  [[nodiscard]] int tiles_u() const { return (width_px + tile_px - 1) / tile_px; }
};

GridInfo load_grid_info(const fs::path& p) {
  const json j = read_json(p);
  GridInfo g;
  g.mpp = j.at("mpp").get<double>();
  const auto b = j.at("bounds").get<std::vector<double>>();
  g.bounds = {b.at(0), b.at(1), b.at(2), b.at(3)};
  g.width_px = j.at("width_px").get<int>();
  g.height_px = j.at("height_px").get<int>();
  g.tile_px = j.at("tile_px").get<int>();
  g.range = {j.at("h_min").get<double>(), j.at("h_max").get<double>()};
  g.layers = j.at("layers").get<std::vector<std::int64_t>>();
  return g;
}

std::uint32_t tile_number(TileIndex t, int tiles_u) {
  return static_cast<std::uint32_t>(t.v) * static_cast<std::uint32_t>(tiles_u) +
         static_cast<std::uint32_t>(t.u);
}

TileIndex tile_from_number(std::uint32_t n, int tiles_u) {
  const auto tu = static_cast<std::uint32_t>(tiles_u);
  return {static_cast<std::int32_t>(n % tu), static_cast<std::int32_t>(n / tu)};
}

// Planar-frame centroid of a tile's observed cells, back in world coordinates.
Point3 tile_center(const DemGrid& grid, TileIndex t) {
  const auto& tile = grid.tiles.at(t);
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  int n = 0;
  for (int y = 0; y < grid.tile_px; ++y) {
    for (int x = 0; x < grid.tile_px; ++x) {
      const double h = tile.height[static_cast<std::size_t>(y) * grid.tile_px + x];
      if (is_empty(h)) continue;
      const Eigen::Vector2d uv =
          grid.pixel_center_uv(t.u * grid.tile_px + x, t.v * grid.tile_px + y);
      acc += Eigen::Vector3d(uv.x(), uv.y(), h);
      ++n;
    }
  }
  return from_plane_coords(grid.frame, acc / std::max(n, 1));
}

struct HitRow {
  SubmapId query{0};
  TileHit hit;
};

std::vector<HitRow> read_hits(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::DependencyError, "missing artifact " + p.string());
  std::vector<HitRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    HitRow r;
    unsigned long long q = 0;
    unsigned long long c = 0;
    unsigned long long t = 0;
    double s = 0.0;
    if (std::sscanf(line.c_str(), "%llu,%llu,%llu,%lf", &q, &c, &t, &s) != 4) {
      throw Error(ErrorCode::FormatError, p.string() + ": bad row '" + line + "'");
    }
    r.query = static_cast<SubmapId>(q);
    r.hit = {static_cast<std::uint32_t>(c), t, s};
    rows.push_back(r);
  }
  return rows;
}

std::map<SubmapId, std::vector<Eigen::VectorXd>> group_descriptors(
    const std::vector<DescriptorRecord>& recs) {
  std::map<SubmapId, std::vector<Eigen::VectorXd>> out;
  for (const auto& r : recs) out[submap_of(r.id)].push_back(r.vector);
  return out;
}

struct LoadedSubmap {
  std::int64_t id{0};
  std::vector<Frame> frames;
  std::optional<std::size_t> transition_frame;
  PointCloud cloud;
};

std::vector<LoadedSubmap> load_ingested(const fs::path& manifest_path, bool with_clouds) {
  const Manifest m = read_manifest(manifest_path);
  std::vector<LoadedSubmap> out;
  out.reserve(m.submaps.size());
  for (const auto& e : m.submaps) {
    LoadedSubmap s{e.id, e.frames, e.transition_frame, {}};
    if (with_clouds) s.cloud = read_ply(e.cloud);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::uint8_t> terrain_colormap(double x) {
  // Dark green through yellow-green to pale yellow.
  x = std::clamp(x, 0.0, 1.0);
  const double r = 30 + x * 210;
  const double g = 70 + x * 170;
  const double b = 30 + x * 60;
  return {static_cast<std::uint8_t>(std::lround(r)), static_cast<std::uint8_t>(std::lround(g)),
          static_cast<std::uint8_t>(std::lround(b))};
}

}  // namespace

void EventLog::event(const std::string& stage, const std::string& name,
                     const std::map<std::string, std::string>& fields) {
  if (json_ == nullptr) return;
  ojson j;
  j["stage"] = stage;
  j["event"] = name;
  for (const auto& [k, v] : fields) {
    std::int64_t n = 0;
    double x = 0.0;
    const char* end = v.data() + v.size();
    if (const auto [p, ec] = std::from_chars(v.data(), end, n); ec == std::errc() && p == end) {
      j[k] = n;
    } else if (const auto [q, ec2] = std::from_chars(v.data(), end, x);
               ec2 == std::errc() && q == end && std::isfinite(x)) {
      j[k] = x;
    } else {
      j[k] = v;
    }
  }
  *json_ << j.dump() << '\n';
  json_->flush();
}

void EventLog::info(const std::string& message) {
  if (text_ != nullptr) *text_ << message << '\n';
}

void EventLog::warn(const std::string& message) {
  if (text_ != nullptr) *text_ << "warning: " << message << '\n';
}

Pipeline::Pipeline(fs::path session, PipelineConfig config, EventLog log)
    : session_(std::move(session)), config_(std::move(config)), log_(log) {
  config_.validate();
  fs::create_directories(session_);
}

void Pipeline::require(const std::string& stage) const {
  const fs::path p = path(stage + "/stamp.json");
  if (!fs::exists(p)) {
    throw Error(ErrorCode::DependencyError,
                "required artifact " + p.string() + " is missing; run the '" + stage + "' stage first");
  }
}

void Pipeline::stamp(const std::string& stage, const std::map<std::string, std::string>& extra) const {
  ojson j;
  j["stage"] = stage;
  j["seed"] = config_.seed;
  char hash[24];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(fnv1a(config_.canonical())));
  j["config_hash"] = hash;
  for (const auto& [k, v] : extra) j[k] = v;
  write_json(path(stage + "/stamp.json"), j);
}

// ---------------------------------------------------------------- ingest

std::vector<IngestRow> Pipeline::ingest(const fs::path& manifest_path) {
  const Manifest manifest = read_manifest(manifest_path);
  std::set<std::int64_t> seen;
  for (const auto& e : manifest.submaps) {
    checked_submap_id(e.id);
    if (!fs::exists(e.cloud)) {
      throw Error(ErrorCode::IoError, "submap " + std::to_string(e.id) + ": cloud file " +
                                          e.cloud.string() + " does not exist");
    }
  }
  fs::create_directories(path("ingest/clouds"));

  std::vector<IngestRow> rows(manifest.submaps.size());
  Manifest out = manifest;
  parallel_for(manifest.submaps.size(), config_.jobs, [&](std::size_t k) {
    const auto& e = manifest.submaps[k];
    const PointCloud cloud = read_cloud(e.cloud);
    PointCloud kept;
    if (config_.ingest.per_frame && cloud.has_source_frame() && !e.frames.empty()) {
      std::vector<Point3> centers;
      for (const auto& f : e.frames) centers.push_back(f.pose.translation());
      kept = depth_filter_by_source(cloud, centers, config_.ingest.d_min, config_.ingest.d_max);
    } else {
      kept = depth_filter(cloud, config_.ingest.d_min, config_.ingest.d_max);
    }
    const fs::path dst = path("ingest/clouds/" + submap_name(e.id) + ".ply");
    write_ply(dst, kept);
    out.submaps[k].cloud = dst;
    rows[k] = {e.id, cloud.size(), kept.size()};
  });

  auto report = open_out(path("ingest/report.csv"));
  report << "id,points_in,points_out,status\n";
  for (const auto& r : rows) {
    const bool empty = r.points_out == 0;
    report << r.id << ',' << r.points_in << ',' << r.points_out << ',' << (empty ? "empty" : "ok")
           << '\n';
    if (empty) log_.warn("submap " + std::to_string(r.id) + " has no points after depth filtering; later stages skip it");
    log_.event("ingest", "submap", {{"id", std::to_string(r.id)},
                                    {"points_in", std::to_string(r.points_in)},
                                    {"points_out", std::to_string(r.points_out)}});
  }
  write_manifest(path("ingest/submaps.json"), out, path("ingest"));
  stamp("ingest", {{"submaps", std::to_string(rows.size())}});
  log_.info("ingest: " + std::to_string(rows.size()) + " submaps");
  return rows;
}

// ---------------------------------------------------------------- dem

void Pipeline::dem() {
  require("ingest");
  auto submaps = load_ingested(path("ingest/submaps.json"), true);
  std::erase_if(submaps, [&](const LoadedSubmap& s) {
    if (!s.cloud.empty()) return false;
    log_.warn("dem: skipping empty submap " + std::to_string(s.id));
    return true;
  });
  if (submaps.empty()) throw Error(ErrorCode::EmptyInput, "no submap has points left after ingest");

  // Stride subsample of the union for the plane fit.
  std::size_t total = 0;
  for (const auto& s : submaps) total += s.cloud.size();
  const auto max_pts = static_cast<std::size_t>(config_.plane.max_points);
  const std::size_t stride = total > max_pts ? (total + max_pts - 1) / max_pts : 1;
  PointCloud sample;
  std::size_t g = 0;
  for (const auto& s : submaps) {
    for (std::size_t i = 0; i < s.cloud.size(); ++i, ++g) {
      if (g % stride != 0) continue;
      sample.points.push_back(s.cloud.points[i]);
      sample.confidence.push_back(s.cloud.has_confidence() ? s.cloud.confidence[i] : 1.0f);
    }
  }
  RansacParams rp;
  rp.iterations = config_.plane.iterations;
  rp.inlier_thresh = config_.plane.inlier_thresh;
  rp.seed = derive_seed(config_.seed, "plane");
  rp.confidence_weighted = config_.plane.confidence_weighted;
  const PlaneFit fit = fit_plane_ransac(sample, rp);
  const CanonicalFrame frame = build_canonical_frame(fit.plane, sample.select(fit.inlier_mask));
  log_.event("dem", "plane", {{"inliers", std::to_string(fit.inlier_count)},
                              {"sampled", std::to_string(sample.size())}});

  std::vector<std::vector<Eigen::Vector3d>> uvh(submaps.size());
  std::vector<Eigen::Vector3d> all;
  for (std::size_t k = 0; k < submaps.size(); ++k) {
    uvh[k].reserve(submaps[k].cloud.size());
    for (const auto& p : submaps[k].cloud.points) uvh[k].push_back(to_plane_coords(frame, p));
    all.insert(all.end(), uvh[k].begin(), uvh[k].end());
  }
  const Bounds bounds = compute_bounds(all);
  all.clear();
  all.shrink_to_fit();
  const double mpp = compute_mpp(bounds, config_.dem.target_px_long);

  std::vector<DemGrid> layers(submaps.size());
  parallel_for(submaps.size(), config_.jobs,
               [&](std::size_t k) { layers[k] = rasterize(uvh[k], config_.dem, bounds, mpp, frame); });

  std::vector<const DemGrid*> ptrs;
  for (const auto& l : layers) ptrs.push_back(&l);
  const HeightRange range = height_percentiles(ptrs, config_.dem.p_lo, config_.dem.p_hi);

  fs::remove_all(path("dem"));
  fs::create_directories(path("dem/layers"));
  fs::create_directories(path("dem/tiles"));
  parallel_for(submaps.size(), config_.jobs, [&](std::size_t k) {
    const std::string name = submap_name(submaps[k].id);
    save_dem_layer(path("dem/layers/" + name + ".bin"), layers[k]);
    const fs::path tdir = path("dem/tiles/" + name);
    fs::create_directories(tdir);
    for (const auto& [idx, tile] : layers[k].tiles) write_tile_png(tdir / (tile_name(idx) + ".png"), layers[k], idx);
  });

  ojson j;
  j["mpp"] = mpp;
  j["bounds"] = {bounds.u0, bounds.u1, bounds.v0, bounds.v1};
  j["width_px"] = layers[0].width_px;
  j["height_px"] = layers[0].height_px;
  j["tile_px"] = config_.dem.tile_px;
  j["reducer"] = to_string(config_.dem.reducer.kind);
  j["tau"] = config_.dem.reducer.tau;
  j["h_min"] = range.h_min;
  j["h_max"] = range.h_max;
  std::vector<double> rot(frame.rotation.data(), frame.rotation.data() + 9);
  j["frame"] = {{"rotation_colmajor", rot}, {"origin", {frame.origin.x(), frame.origin.y(), frame.origin.z()}}};
  std::vector<std::int64_t> ids;
  std::size_t tiles = 0;
  std::size_t rejected = 0;
  for (std::size_t k = 0; k < submaps.size(); ++k) {
    ids.push_back(submaps[k].id);
    tiles += layers[k].tiles.size();
    rejected += layers[k].rejected_points;
  }
  j["layers"] = ids;
  write_json(path("dem/grid.json"), j);
  stamp("dem");
  log_.event("dem", "done", {{"layers", std::to_string(ids.size())},
                             {"tiles", std::to_string(tiles)},
                             {"mpp", num(mpp)},
                             {"rejected_points", std::to_string(rejected)}});
  log_.info("dem: " + std::to_string(ids.size()) + " layers, " + std::to_string(tiles) +
            " tiles at " + num(mpp) + " m/px");
}

// ---------------------------------------------------------------- embed

void Pipeline::embed() {
  require("dem");
  const GridInfo grid = load_grid_info(path("dem/grid.json"));
  const auto& enc = config_.embed.encoder;
  const int dim = enc.kind == EncoderKind::BuiltinGradHist ? kBuiltinDim : enc.dim;

  std::vector<std::vector<DescriptorRecord>> tiles(grid.layers.size());
  std::vector<std::vector<DescriptorRecord>> chips(grid.layers.size());
  std::vector<std::size_t> skipped(grid.layers.size(), 0);
  parallel_for(grid.layers.size(), config_.jobs, [&](std::size_t k) {
    const std::int64_t id = grid.layers[k];
    const std::string name = submap_name(id);
    const DemGrid layer = load_dem_layer(path("dem/layers/" + name + ".bin"));
    const RenderedLayer rendered = render_layer(layer, grid.range, config_.dem.alpha_edge);

    std::unique_ptr<TokenEncoder> encoder;
    if (enc.kind == EncoderKind::BuiltinGradHist) {
      encoder = std::make_unique<BuiltinEncoder>(enc.patch_px);
    } else {
      auto pre = std::make_unique<PrecomputedEncoder>(enc.dim, enc.patch_px);
      for (const auto& [idx, t] : layer.tiles) {
        const fs::path tok = fs::path(config_.embed.tokens_dir) / name / (tile_name(idx) + ".tok");
        if (!fs::exists(tok)) {
          throw Error(ErrorCode::DependencyError, "missing token file " + tok.string());
        }
        pre->add(idx, load_precomputed_tokens(tok, enc.dim).tokens);
      }
      encoder = std::move(pre);
    }
    const TileEmbedder embedder(rendered.intensity, rendered.gradient, *encoder);
    const auto sid = checked_submap_id(id);
    for (const auto& [idx, t] : layer.tiles) {
      const std::uint64_t tid = make_tile_id(sid, tile_number(idx, grid.tiles_u()));
      try {
        tiles[k].push_back({tid, embedder.embed_global_tile(idx, config_.embed.nbhd).vector});
        chips[k].push_back({tid, embedder.embed_query_chip(idx).vector});
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NoSalientContent && e.code() != ErrorCode::AllEmptyRegion) throw;
        if (tiles[k].size() > chips[k].size()) tiles[k].pop_back();
        ++skipped[k];
      }
    }
  });

  std::vector<DescriptorRecord> all_tiles;
  std::vector<DescriptorRecord> all_chips;
  std::size_t n_skipped = 0;
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    all_tiles.insert(all_tiles.end(), tiles[k].begin(), tiles[k].end());
    all_chips.insert(all_chips.end(), chips[k].begin(), chips[k].end());
    n_skipped += skipped[k];
  }
  fs::create_directories(path("embed"));
  save_descriptors(path("embed/tiles.dsc"), all_tiles, dim);
  save_descriptors(path("embed/chips.dsc"), all_chips, dim);
  stamp("embed", {{"dim", std::to_string(dim)}});
  log_.event("embed", "done", {{"tiles", std::to_string(all_tiles.size())},
                               {"skipped", std::to_string(n_skipped)},
                               {"dim", std::to_string(dim)}});
  log_.info("embed: " + std::to_string(all_tiles.size()) + " tile descriptors (dim " +
            std::to_string(dim) + ")");
}

// ---------------------------------------------------------------- index

void Pipeline::index() {
  require("embed");
  const auto recs = load_descriptors(path("embed/tiles.dsc"));
  if (recs.empty()) throw Error(ErrorCode::EmptyIndex, "no tile descriptors to index");
  IndexParams p = config_.index;
  p.ef_search = config_.query.ef_search;
  p.seed = derive_seed(config_.seed, "index");
  HnswIndex idx(static_cast<int>(recs.front().vector.size()), p);
  for (const auto& r : recs) idx.insert(r.id, r.vector);
  fs::create_directories(path("index"));
  idx.save(path("index/index.hnsw"));
  stamp("index");
  log_.event("index", "done", {{"entries", std::to_string(idx.size())},
                               {"max_level", std::to_string(idx.max_level())}});
  log_.info("index: " + std::to_string(idx.size()) + " entries");
}

// ---------------------------------------------------------------- query

void Pipeline::query() {
  require("index");
  const HnswIndex idx = HnswIndex::load(path("index/index.hnsw"));
  const auto chips = load_descriptors(path("embed/chips.dsc"));
  std::map<SubmapId, std::vector<const DescriptorRecord*>> by_submap;
  for (const auto& c : chips) by_submap[submap_of(c.id)].push_back(&c);
  std::vector<SubmapId> queries;
  for (const auto& [q, v] : by_submap) queries.push_back(q);

  // Only submaps older than the temporal window are searchable, as they
  // would be when the query submap is finalized online.
  const auto window = static_cast<std::int64_t>(config_.loops.select.temporal_window);
  std::vector<std::vector<TileHit>> hits(queries.size());
  parallel_for(queries.size(), config_.jobs, [&](std::size_t qi) {
    const SubmapId q = queries[qi];
    const IdFilter admit = [q, window](std::uint64_t id) {
      return static_cast<std::int64_t>(submap_of(id)) + window < static_cast<std::int64_t>(q);
    };
    for (const auto* c : by_submap[q]) {
      for (const auto& h : idx.search(c->vector, config_.query.k, admit, config_.query.ef_search)) {
        hits[qi].push_back({tile_of(c->id), h.id, h.similarity});
      }
    }
  });

  fs::create_directories(path("query"));
  auto hout = open_out(path("query/hits.csv"));
  auto vout = open_out(path("query/votes.csv"));
  hout << "query,chip,tile_id,similarity\n";
  vout << "query,submap,score\n";
  std::size_t n_hits = 0;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    for (const auto& h : hits[qi]) {
      hout << queries[qi] << ',' << h.chip_id << ',' << h.tile_id << ',' << h.similarity << '\n';
    }
    for (const auto& [s, score] : vote_submaps(hits[qi])) vout << queries[qi] << ',' << s << ',' << score << '\n';
    n_hits += hits[qi].size();
  }
  stamp("query");
  log_.event("query", "done", {{"queries", std::to_string(queries.size())}, {"hits", std::to_string(n_hits)}});
  log_.info("query: " + std::to_string(queries.size()) + " query submaps, " + std::to_string(n_hits) + " hits");
}

// ---------------------------------------------------------------- loops

LoopsSummary Pipeline::loops() {
  require("query");
  const GridInfo grid = load_grid_info(path("dem/grid.json"));
  const auto submaps = load_ingested(path("ingest/submaps.json"), true);
  std::map<SubmapId, std::size_t> slot;
  for (std::size_t k = 0; k < submaps.size(); ++k) slot[checked_submap_id(submaps[k].id)] = k;
  const auto tile_desc = group_descriptors(load_descriptors(path("embed/tiles.dsc")));
  const auto chip_desc = group_descriptors(load_descriptors(path("embed/chips.dsc")));
  const auto hit_rows = read_hits(path("query/hits.csv"));
  std::map<SubmapId, std::vector<TileHit>> hits;
  for (const auto& r : hit_rows) hits[r.query].push_back(r.hit);

  std::map<SubmapId, DemGrid> layers;
  for (auto id : grid.layers) {
    layers.emplace(checked_submap_id(id), load_dem_layer(path("dem/layers/" + submap_name(id) + ".bin")));
  }

  LoopsSummary summary;
  for (const auto& [q, qhits] : hits) {
    const auto scores = vote_submaps(qhits);
    const auto selected = select_covisible(scores, q, config_.loops.select);
    if (selected.empty()) continue;
    std::vector<LoopCandidate> cands;
    for (const auto& s : selected) {
      const auto it = tile_desc.find(s.id);
      if (it == tile_desc.end()) continue;
      cands.push_back({q, s.id, s.score, rerank_vpr(chip_desc.at(q), it->second, config_.loops.k_prime), false});
    }
    cands = accept_by_rerank(std::move(cands), config_.loops.rho);
    std::stable_sort(cands.begin(), cands.end(), [](const LoopCandidate& a, const LoopCandidate& b) {
      return a.rerank_score > b.rerank_score;
    });
    summary.queries.push_back({q, cands});
  }

  // Geometric verification of the best-ranked accepted pairs.
  struct Job {
    const LoopCandidate* cand;
  };
  std::vector<Job> jobs;
  for (const auto& qo : summary.queries) {
    int taken = 0;
    for (const auto& c : qo.ranked) {
      if (!c.accepted || taken == config_.loops.verify_top) continue;
      jobs.push_back({&c});
      ++taken;
    }
  }
  std::vector<LoopVerification> ver(jobs.size());
  std::vector<Sim3> delta(jobs.size());
  parallel_for(jobs.size(), config_.jobs, [&](std::size_t n) {
    const LoopCandidate& c = *jobs[n].cand;
    const DemGrid& li = layers.at(c.query);
    const DemGrid& lj = layers.at(c.neighbor);
    // Translation hypotheses from matched chip/tile centers; keep the one
    // with the most similarity mass within 1 m.
    std::vector<std::pair<Eigen::Vector3d, double>> offsets;
    for (const auto& h : hits.at(c.query)) {
      if (submap_of(h.tile_id) != c.neighbor) continue;
      const TileIndex ti = tile_from_number(h.chip_id, grid.tiles_u());
      const TileIndex tj = tile_from_number(tile_of(h.tile_id), grid.tiles_u());
      offsets.emplace_back(tile_center(li, ti) - tile_center(lj, tj), h.similarity);
    }
    std::vector<Sim3> seeds{Sim3()};
    if (!offsets.empty()) {
      double best = -1.0;
      Eigen::Vector3d best_t = Eigen::Vector3d::Zero();
      for (const auto& [o, w] : offsets) {
        double mass = 0.0;
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (const auto& [o2, w2] : offsets) {
          if ((o2 - o).norm() < 1.0) {
            mass += w2;
            acc += w2 * o2;
          }
        }
        if (mass > best) {
          best = mass;
          best_t = acc / mass;
        }
      }
      // ICP maps the query cloud onto the neighbor: p_j = p_i - offset.
      seeds.emplace_back(Eigen::Quaterniond::Identity(), -best_t, 1.0);
    }
    const auto& pi = submaps[slot.at(c.query)].cloud.points;
    const auto& pj = submaps[slot.at(c.neighbor)].cloud.points;
    const auto src = stride_subsample(pi, static_cast<std::size_t>(config_.loops.icp_points));
    // Rigid alignment decides the gate: with a free scale, ICP on smooth
    // terrain can shrink the source onto any patch and look perfect.
    IcpParams ip;
    ip.iterations = config_.loops.icp_iterations;
    ip.with_scale = false;
    std::optional<IcpResult> best;
    const auto passes = [&](const IcpResult& r) {
      return r.rms <= config_.loops.max_rms && r.overlap >= config_.loops.min_overlap;
    };
    for (const auto& s : seeds) {
      if (best && passes(*best)) break;
      try {
        const IcpResult r = icp_align(src, pj, s, ip);
        if (!best || r.overlap > best->overlap || (r.overlap == best->overlap && r.rms < best->rms)) best = r;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateInput) throw;
      }
    }
    LoopVerification v{c.query, c.neighbor, std::numeric_limits<double>::infinity(), 0.0, false};
    if (best) {
      v.rms = best->rms;
      v.overlap = best->overlap;
      v.passed = passes(*best);
      delta[n] = best->transform.inverse();
    }
    if (v.passed) {
      // Scale refinement at the final gate; kept only if the scale stays plausible.
      IcpParams fine;
      fine.iterations = 5;
      fine.max_dist_start = fine.max_dist_end = ip.max_dist_end;
      try {
        const IcpResult r = icp_align(src, pj, best->transform, fine);
        if (std::abs(std::log(r.transform.scale())) <= config_.loops.max_log_scale &&
            r.overlap >= best->overlap - 0.05) {
          v.rms = r.rms;
          v.overlap = r.overlap;
          delta[n] = r.transform.inverse();
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateInput) throw;
      }
    }
    ver[n] = v;
  });

  // Pose graph: odometry chain over non-empty submaps plus verified loops.
  PoseGraph graph;
  std::set<SubmapId> active;
  for (auto id : grid.layers) active.insert(checked_submap_id(id));
  std::optional<std::size_t> prev;
  const Matrix7d odo_info = odometry_information(config_.odometry.sigma_t,
                                                 config_.odometry.sigma_phi_deg * std::numbers::pi / 180.0,
                                                 config_.odometry.sigma_scale);
  for (std::size_t k = 0; k < submaps.size(); ++k) {
    const auto& s = submaps[k];
    const SubmapId id = checked_submap_id(s.id);
    if (!active.contains(id) || s.frames.empty()) continue;
    graph.poses[id] = s.frames.front().pose;
    if (!prev) {
      graph.anchor = id;
    } else {
      const auto& p = submaps[*prev];
      const Sim3& Tp = p.frames.front().pose;
      Sim3 meas = Tp.inverse() * s.frames.front().pose;
      if (s.transition_frame) {
        const Frame& tf = s.frames[*s.transition_frame];
        for (const auto& f : p.frames) {
          if (std::abs(f.timestamp - tf.timestamp) < 1e-9) {
            meas = Tp.inverse() * f.pose * (s.frames.front().pose.inverse() * tf.pose).inverse();
            break;
          }
        }
      }
      graph.edges.push_back({checked_submap_id(p.id), id, EdgeType::Odometry, meas, odo_info});
    }
    prev = k;
  }

  CovisGraph covis;
  for (auto id : active) covis.add_node(id);
  std::vector<LoopCandidate> log_rows;
  for (const auto& qo : summary.queries) {
    std::vector<LoopCandidate> acc;
    for (const auto& c : qo.ranked) {
      log_rows.push_back(c);
      if (c.accepted) acc.push_back(c);
    }
    covis.update(qo.query, acc);
  }
  for (std::size_t n = 0; n < jobs.size(); ++n) {
    const LoopCandidate& c = *jobs[n].cand;
    log_.event("loops", "verify", {{"query", std::to_string(c.query)},
                                   {"neighbor", std::to_string(c.neighbor)},
                                   {"rms", num(ver[n].rms)},
                                   {"overlap", num(ver[n].overlap)},
                                   {"passed", ver[n].passed ? "true" : "false"}});
    if (!ver[n].passed) continue;
    const Sim3& Ti = graph.poses.at(c.query);
    const Sim3& Tj = graph.poses.at(c.neighbor);
    const double n_chips = static_cast<double>(chip_desc.at(c.query).size());
    const double rerank_norm = c.rerank_score / (n_chips * config_.loops.k_prime);
    graph.edges.push_back({c.query, c.neighbor, EdgeType::Loop, Ti.inverse() * delta[n] * Tj,
                           edge_information(c.vote_score, rerank_norm, ver[n].rms, config_.loops.info)});
    ++summary.loop_edges;
  }
  summary.verifications = ver;

  fs::create_directories(path("loops"));
  write_candidate_log(path("loops/candidates.csv"), log_rows);
  auto vout = open_out(path("loops/verification.csv"));
  vout << "query_id,neighbor_id,rms,overlap,passed\n";
  for (const auto& v : ver) {
    vout << v.query << ',' << v.neighbor << ',' << v.rms << ',' << v.overlap << ',' << (v.passed ? 1 : 0) << '\n';
  }
  covis.save_json(path("loops/covis.json"));
  save_pose_graph(path(kPoseGraph), graph);
  stamp("loops");
  log_.event("loops", "done", {{"queries", std::to_string(summary.queries.size())},
                               {"verified", std::to_string(jobs.size())},
                               {"loop_edges", std::to_string(summary.loop_edges)}});
  log_.info("loops: " + std::to_string(summary.loop_edges) + " loop edges from " +
            std::to_string(jobs.size()) + " accepted candidates");
  return summary;
}

// ---------------------------------------------------------------- optimize

OptimizeSummary Pipeline::optimize() {
  require("loops");
  const PoseGraph graph = load_pose_graph(path(kPoseGraph));
  const OptimizeResult res = optimize_pose_graph(graph, config_.optimize);
  const auto submaps = load_ingested(path("ingest/submaps.json"), false);

  // Frame poses re-expressed through their submap's correction; a frame
  // shared by two submaps takes the later one.
  std::map<double, Sim3> opt;
  std::map<double, Sim3> odom;
  for (const auto& s : submaps) {
    const auto it = res.poses.find(static_cast<PoseId>(s.id));
    if (s.id < 0 || it == res.poses.end()) continue;
    const Sim3 correction = it->second * graph.poses.at(it->first).inverse();
    for (const auto& f : s.frames) {
      opt[f.timestamp] = correction * f.pose;
      odom[f.timestamp] = f.pose;
    }
  }
  Trajectory t_opt;
  Trajectory t_odom;
  for (const auto& [ts, T] : opt) t_opt.push_back({ts, T});
  for (const auto& [ts, T] : odom) t_odom.push_back({ts, T});
  fs::create_directories(path("optimize"));
  write_tum(path(kTrajectoryOpt), t_opt);
  write_tum(path(kTrajectoryOdom), t_odom);
  write_tum(path("optimize/submap_poses.tum"), poses_to_trajectory(res.poses));
  write_optimizer_report(path("optimize/report.csv"), res.report);
  stamp("optimize");

  std::size_t loops = 0;
  for (const auto& e : graph.edges) loops += e.type == EdgeType::Loop ? 1 : 0;
  log_.event("optimize", "done", {{"iterations", std::to_string(res.report.iterations)},
                                  {"initial_cost", num(res.report.initial_cost)},
                                  {"final_cost", num(res.report.final_cost)},
                                  {"converged", res.report.converged ? "true" : "false"}});
  log_.info("optimize: cost " + num(res.report.initial_cost) + " -> " + num(res.report.final_cost) +
            " in " + std::to_string(res.report.iterations) + " iterations");
  return {res.report, res.poses.size(), loops};
}

// ---------------------------------------------------------------- eval

EvalSummary Pipeline::eval(const fs::path& est, const fs::path& gt) {
  const bool default_est = est.empty();
  if (default_est) require("optimize");
  const fs::path est_path = default_est ? path(kTrajectoryOpt) : est;
  const fs::path gt_path = gt.empty() ? fs::path(config_.eval.gt) : gt;
  if (gt_path.empty()) throw Error(ErrorCode::ConfigError, "no ground truth given (eval.gt or --gt)");
  if (!fs::exists(gt_path)) throw Error(ErrorCode::IoError, "ground truth " + gt_path.string() + " does not exist");
  if (!fs::exists(est_path)) throw Error(ErrorCode::IoError, "trajectory " + est_path.string() + " does not exist");
  const Trajectory truth = read_tum(gt_path);

  EvalSummary out;
  out.optimized = evaluate_ate(read_tum(est_path), truth, config_.eval.with_scale, config_.eval.max_dt);
  if (default_est && fs::exists(path(kTrajectoryOdom))) {
    out.odometry = evaluate_ate(read_tum(path(kTrajectoryOdom)), truth, config_.eval.with_scale,
                                config_.eval.max_dt);
  }
  fs::create_directories(path("eval"));
  ojson j;
  j["est"] = est_path.string();
  j["gt"] = gt_path.string();
  j["align"] = config_.eval.with_scale ? "sim3" : "se3";
  j["ate_rmse"] = out.optimized.rmse;
  j["pairs"] = out.optimized.pairs;
  if (out.odometry) {
    j["odometry_ate_rmse"] = out.odometry->rmse;
    j["reduction"] = out.odometry->rmse > 0.0 ? 1.0 - out.optimized.rmse / out.odometry->rmse : 0.0;
  }
  write_json(path("eval/ate.json"), j);
  stamp("eval");
  std::map<std::string, std::string> f{{"ate_rmse", num(out.optimized.rmse)},
                                       {"pairs", std::to_string(out.optimized.pairs)}};
  if (out.odometry) f["odometry_ate_rmse"] = num(out.odometry->rmse);
  log_.event("eval", "done", f);
  return out;
}

// ---------------------------------------------------------------- render

void Pipeline::render() {
  require("dem");
  const GridInfo grid = load_grid_info(path("dem/grid.json"));
  fs::create_directories(path("render"));
  const bool color = config_.render.colormap == "terrain";
  const int ch = color ? 3 : 1;
  const Eigen::Vector3d light = Eigen::Vector3d(-1.0, -1.0, 2.0).normalized();

  std::vector<double> mosaic(static_cast<std::size_t>(grid.width_px) * grid.height_px, kEmpty);
  const auto to_png = [&](const fs::path& p, const std::vector<double>& img) {
    std::vector<std::uint8_t> px(img.size() * ch, 0);
    for (std::size_t i = 0; i < img.size(); ++i) {
      if (is_empty(img[i])) continue;
      if (color) {
        const auto rgb = terrain_colormap(img[i]);
        std::copy(rgb.begin(), rgb.end(), px.begin() + static_cast<std::ptrdiff_t>(3 * i));
      } else {
        px[i] = static_cast<std::uint8_t>(std::lround(1.0 + 254.0 * std::clamp(img[i], 0.0, 1.0)));
      }
    }
    write_png8(p, grid.width_px, grid.height_px, ch, px);
  };
  for (auto id : grid.layers) {
    const DemGrid layer = load_dem_layer(path("dem/layers/" + submap_name(id) + ".bin"));
    const TiledRaster r = config_.render.hillshade ? hillshade(layer, light) : normalize_heights(layer, grid.range);
    std::vector<double> img(mosaic.size(), kEmpty);
    for (int y = 0; y < grid.height_px; ++y) {
      for (int x = 0; x < grid.width_px; ++x) {
        const double v = r.at(x, y);
        if (is_empty(v)) continue;
        img[static_cast<std::size_t>(y) * grid.width_px + x] = v;
        mosaic[static_cast<std::size_t>(y) * grid.width_px + x] = v;
      }
    }
    to_png(path("render/" + submap_name(id) + ".png"), img);
  }
  to_png(path("render/mosaic.png"), mosaic);
  stamp("render");
  log_.event("render", "done", {{"layers", std::to_string(grid.layers.size())}});
}

void Pipeline::run(const fs::path& manifest) {
  ingest(manifest);
  dem();
  embed();
  index();
  query();
  loops();
  optimize();
  if (!config_.eval.gt.empty()) {
    const EvalSummary s = eval();
    log_.info("eval: ATE " + num(s.optimized.rmse) +
              (s.odometry ? " (odometry " + num(s.odometry->rmse) + ")" : std::string()));
  }
}

OptimizeResult optimize_graph_file(const fs::path& graph_path, const OptimizerParams& params,
                                   const fs::path& poses_out) {
  const PoseGraph graph = load_pose_graph(graph_path);
  OptimizeResult res = optimize_pose_graph(graph, params);
  if (!poses_out.empty()) {
    if (poses_out.has_parent_path()) fs::create_directories(poses_out.parent_path());
    write_tum(poses_out, poses_to_trajectory(res.poses));
  }
  return res;
}

}  // namespace demslam
