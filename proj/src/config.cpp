#include "demslam/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "demslam/error.hpp"

namespace demslam {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw Error(ErrorCode::ConfigError, "invalid value '" + value + "' for " + key);
}

double parse_double(const std::string& key, const std::string& v) {
  std::istringstream ss(v);
  double x;
  if (!(ss >> x) || !ss.eof()) bad_value(key, v);
  return x;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int x{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v);
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v);
}

std::string fmt(double x) {
  std::ostringstream ss;
  ss.precision(17);
  ss << x;
  return ss.str();
}

struct Field {
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <typename Member>
Field dbl(Member m) {
  return {[m](PipelineConfig& c, const std::string& k, const std::string& v) { m(c) = parse_double(k, v); },
          [m](const PipelineConfig& c) { return fmt(m(const_cast<PipelineConfig&>(c))); }};
}

template <typename Int, typename Member>
Field integer(Member m) {
  return {[m](PipelineConfig& c, const std::string& k, const std::string& v) { m(c) = parse_int<Int>(k, v); },
          [m](const PipelineConfig& c) { return std::to_string(m(const_cast<PipelineConfig&>(c))); }};
}

template <typename Member>
Field boolean(Member m) {
  return {[m](PipelineConfig& c, const std::string& k, const std::string& v) { m(c) = parse_bool(k, v); },
          [m](const PipelineConfig& c) { return std::string(m(const_cast<PipelineConfig&>(c)) ? "true" : "false"); }};
}

template <typename Member>
Field text(Member m) {
  return {[m](PipelineConfig& c, const std::string&, const std::string& v) { m(c) = v; },
          [m](const PipelineConfig& c) { return m(const_cast<PipelineConfig&>(c)); }};
}

#define REF(expr) [](PipelineConfig& c) -> auto& { return expr; }

const std::map<std::string, Field>& registry() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    f["run.seed"] = integer<std::uint64_t>(REF(c.seed));
    f["run.jobs"] = integer<int>(REF(c.jobs));
    f["ingest.d_min"] = dbl(REF(c.ingest.d_min));
    f["ingest.d_max"] = dbl(REF(c.ingest.d_max));
    f["ingest.per_frame"] = boolean(REF(c.ingest.per_frame));
    f["plane.iterations"] = integer<int>(REF(c.plane.iterations));
    f["plane.inlier_thresh"] = dbl(REF(c.plane.inlier_thresh));
    f["plane.confidence_weighted"] = boolean(REF(c.plane.confidence_weighted));
    f["plane.max_points"] = integer<int>(REF(c.plane.max_points));
    f["dem.target_px_long"] = integer<int>(REF(c.dem.target_px_long));
    f["dem.tile_px"] = integer<int>(REF(c.dem.tile_px));
    f["dem.reducer"] = {
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          try {
            c.dem.reducer.kind = parse_reducer(v);
          } catch (const Error&) {
            bad_value(k, v);
          }
        },
        [](const PipelineConfig& c) { return to_string(c.dem.reducer.kind); }};
    f["dem.tau"] = dbl(REF(c.dem.reducer.tau));
    f["dem.p_lo"] = dbl(REF(c.dem.p_lo));
    f["dem.p_hi"] = dbl(REF(c.dem.p_hi));
    f["dem.alpha_edge"] = dbl(REF(c.dem.alpha_edge));
    f["embed.encoder"] = {
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          if (v == "builtin") {
            c.embed.encoder.kind = EncoderKind::BuiltinGradHist;
          } else if (v == "tokens") {
            c.embed.encoder.kind = EncoderKind::PrecomputedTokens;
          } else {
            bad_value(k, v);
          }
        },
        [](const PipelineConfig& c) {
          return std::string(c.embed.encoder.kind == EncoderKind::BuiltinGradHist ? "builtin"
                                                                                  : "tokens");
        }};
    f["embed.dim"] = integer<int>(REF(c.embed.encoder.dim));
    f["embed.patch_px"] = integer<int>(REF(c.embed.encoder.patch_px));
    f["embed.tokens_dir"] = text(REF(c.embed.tokens_dir));
    f["embed.nbhd"] = integer<int>(REF(c.embed.nbhd));
    f["index.M"] = integer<int>(REF(c.index.M));
    f["index.ef_construction"] = integer<int>(REF(c.index.ef_construction));
    f["query.k"] = integer<int>(REF(c.query.k));
    f["query.ef_search"] = integer<int>(REF(c.query.ef_search));
    f["loops.tau_s"] = dbl(REF(c.loops.select.tau_s));
    f["loops.top_k"] = integer<int>(REF(c.loops.select.top_k));
    f["loops.temporal_window"] = integer<int>(REF(c.loops.select.temporal_window));
    f["loops.rho"] = dbl(REF(c.loops.rho));
    f["loops.k_prime"] = integer<int>(REF(c.loops.k_prime));
    f["loops.kappa"] = dbl(REF(c.loops.info.kappa));
    f["loops.epsilon"] = dbl(REF(c.loops.info.epsilon));
    f["loops.max_rms"] = dbl(REF(c.loops.max_rms));
    f["loops.min_overlap"] = dbl(REF(c.loops.min_overlap));
    f["loops.icp_iterations"] = integer<int>(REF(c.loops.icp_iterations));
    f["loops.icp_points"] = integer<int>(REF(c.loops.icp_points));
    f["loops.verify_top"] = integer<int>(REF(c.loops.verify_top));
    f["loops.max_log_scale"] = dbl(REF(c.loops.max_log_scale));
    f["odometry.sigma_t"] = dbl(REF(c.odometry.sigma_t));
    f["odometry.sigma_phi_deg"] = dbl(REF(c.odometry.sigma_phi_deg));
    f["odometry.sigma_scale"] = dbl(REF(c.odometry.sigma_scale));
    f["optimize.max_iters"] = integer<int>(REF(c.optimize.max_iters));
    f["optimize.tol"] = dbl(REF(c.optimize.tol));
    f["optimize.huber"] = dbl(REF(c.optimize.huber_delta));
    f["optimize.dense_threshold"] = integer<int>(REF(c.optimize.dense_threshold));
    f["eval.gt"] = text(REF(c.eval.gt));
    f["eval.align"] = {
        [](PipelineConfig& c, const std::string& k, const std::string& v) {
          if (v == "sim3") {
            c.eval.with_scale = true;
          } else if (v == "se3") {
            c.eval.with_scale = false;
          } else {
            bad_value(k, v);
          }
        },
        [](const PipelineConfig& c) { return std::string(c.eval.with_scale ? "sim3" : "se3"); }};
    f["eval.max_dt"] = dbl(REF(c.eval.max_dt));
    f["render.hillshade"] = boolean(REF(c.render.hillshade));
    f["render.colormap"] = text(REF(c.render.colormap));
    return f;
  }();
  return fields;
}

#undef REF

}  // namespace

void PipelineConfig::set(const std::string& dotted_key, const std::string& value) {
  const auto it = registry().find(dotted_key);
  if (it == registry().end()) throw Error(ErrorCode::ConfigError, "unknown key " + dotted_key);
  it->second.set(*this, dotted_key, trim(value));
}

std::string PipelineConfig::get(const std::string& dotted_key) const {
  const auto it = registry().find(dotted_key);
  if (it == registry().end()) throw Error(ErrorCode::ConfigError, "unknown key " + dotted_key);
  return it->second.get(*this);
}

std::vector<std::string> PipelineConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : registry()) out.push_back(k);
  return out;
}

void PipelineConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw Error(ErrorCode::ConfigError, msg); };
  if (jobs < 1) fail("run.jobs must be >= 1");
  if (!(ingest.d_min >= 0.0 && ingest.d_min < ingest.d_max)) {
    fail("ingest bounds need 0 <= d_min < d_max");
  }
  if (plane.iterations < 1) fail("plane.iterations must be >= 1");
  if (!(plane.inlier_thresh > 0.0)) fail("plane.inlier_thresh must be positive");
  if (plane.max_points < 3) fail("plane.max_points must be >= 3");
  dem.validate();
  embed.encoder.validate();
  if (embed.encoder.kind == EncoderKind::PrecomputedTokens && embed.tokens_dir.empty()) {
    fail("embed.tokens_dir is required for the tokens encoder");
  }
  if (embed.nbhd < 1 || embed.nbhd % 2 == 0) fail("embed.nbhd must be a positive odd number");
  index.validate();
  if (query.k < 1) fail("query.k must be >= 1");
  if (query.ef_search < query.k) fail("query.ef_search must be >= query.k");
  if (loops.select.top_k < 1) fail("loops.top_k must be >= 1");
  if (loops.select.temporal_window < 0) fail("loops.temporal_window must be >= 0");
  if (!(loops.rho > 0.0 && loops.rho <= 1.0)) fail("loops.rho must be in (0, 1]");
  if (loops.k_prime < 1) fail("loops.k_prime must be >= 1");
  if (!(loops.info.kappa > 0.0) || !(loops.info.epsilon > 0.0)) {
    fail("loops.kappa and loops.epsilon must be positive");
  }
  if (!(loops.max_rms > 0.0)) fail("loops.max_rms must be positive");
  if (loops.verify_top < 1) fail("loops.verify_top must be >= 1");
  if (!(loops.max_log_scale >= 0.0)) fail("loops.max_log_scale must be >= 0");
  if (loops.min_overlap < 0.0 || loops.min_overlap > 1.0) fail("loops.min_overlap in [0, 1]");
  if (loops.icp_iterations < 1 || loops.icp_points < 3) fail("loops ICP settings too small");
  if (!(odometry.sigma_t > 0.0 && odometry.sigma_phi_deg > 0.0 && odometry.sigma_scale > 0.0)) {
    fail("odometry sigmas must be positive");
  }
  if (optimize.max_iters < 1) fail("optimize.max_iters must be >= 1");
  if (!(optimize.tol > 0.0)) fail("optimize.tol must be positive");
  if (!(eval.max_dt >= 0.0)) fail("eval.max_dt must be >= 0");
  if (render.colormap != "gray" && render.colormap != "terrain") {
    fail("render.colormap must be gray or terrain");
  }
}

std::string PipelineConfig::canonical() const {
  std::string out;
  for (const auto& [k, f] : registry()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": " + e.message() + " (line " +
                                            std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) {
      throw Error(ErrorCode::ConfigError,
                  path.string() + ": key '" + section + "' outside of a section");
    }
    for (const auto& [key, value] : body) {
      try {
        base.set(section + "." + key, value.data());
      } catch (const Error& e) {
        throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
      }
    }
  }
  return base;
}

}  // namespace demslam
