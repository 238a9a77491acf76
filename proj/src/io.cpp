#include "demslam/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "demslam/error.hpp"

namespace demslam {
namespace {

constexpr std::string_view kLayerMagic{"DEMLYR1\0", 8};

struct PlyProperty {
  std::string name;
  std::string type;
};

std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" ||
      t == "float32")
    return 4;
  if (t == "double" || t == "float64") return 8;
  return 0;
}

double ply_read_binary(detail::ByteReader& r, const std::string& t) {
  if (t == "float" || t == "float32") return r.f32();
  if (t == "double" || t == "float64") return r.f64();
  if (t == "int" || t == "int32") return r.i32();
  if (t == "uint" || t == "uint32") return r.u32();
  if (t == "uchar" || t == "uint8") return r.get<std::uint8_t>();
  if (t == "char" || t == "int8") return r.get<std::int8_t>();
  if (t == "ushort" || t == "uint16") return r.get<std::uint16_t>();
  if (t == "short" || t == "int16") return r.get<std::int16_t>();
  throw Error(ErrorCode::FormatError, "unsupported PLY property type " + t);
}

nlohmann::ordered_json frame_to_json(const CanonicalFrame& f) {
  std::vector<double> R(f.rotation.data(), f.rotation.data() + 9);
  return {{"rotation_colmajor", R}, {"origin", {f.origin.x(), f.origin.y(), f.origin.z()}}};
}

struct PngWriteHandle {
  png_structp png{nullptr};
  png_infop info{nullptr};
  FILE* fp{nullptr};
  ~PngWriteHandle() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

// Shared libpng writer; rows are already big-endian for 16-bit data.
void write_png_rows(const std::filesystem::path& path, int width, int height, int bit_depth,
                    int color_type, const std::vector<png_bytep>& rows) {
  PngWriteHandle h;
  h.fp = std::fopen(path.string().c_str(), "wb");
  if (!h.fp) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!h.png) throw Error(ErrorCode::IoError, "png_create_write_struct failed");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw Error(ErrorCode::IoError, "png_create_info_struct failed");
  if (setjmp(png_jmpbuf(h.png))) throw Error(ErrorCode::IoError, "libpng error writing " + path.string());
  png_init_io(h.png, h.fp);
  png_set_IHDR(h.png, h.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(h.png, h.info);
  png_write_image(h.png, const_cast<png_bytepp>(rows.data()));
  png_write_end(h.png, nullptr);
}

}  // namespace

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  cloud.validate();
  std::ostringstream header;
  header << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.size()
         << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (cloud.has_confidence()) header << "property float confidence\n";
  if (cloud.has_source_frame()) header << "property uint frame\n";
  header << "end_header\n";
  detail::ByteWriter w;
  w.bytes(header.str());
  for (std::size_t k = 0; k < cloud.size(); ++k) {
    const auto& p = cloud.points[k];
    w.f32(static_cast<float>(p.x()));
    w.f32(static_cast<float>(p.y()));
    w.f32(static_cast<float>(p.z()));
    if (cloud.has_confidence()) w.f32(cloud.confidence[k]);
    if (cloud.has_source_frame()) w.u32(cloud.source_frame[k]);
  }
  w.save(path);
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  const auto bad = [&](const std::string& msg) {
    return Error(ErrorCode::FormatError, path.string() + ": " + msg);
  };
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw bad("missing 'ply' magic");
  std::string format;
  std::size_t count = 0;
  bool in_vertex = false;
  bool seen_vertex = false;
  std::vector<PlyProperty> props;
  std::size_t header_bytes = line.size() + 1;
  while (std::getline(in, line)) {
    header_bytes += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      ss >> format;
    } else if (word == "element") {
      std::string name;
      ss >> name;
      in_vertex = name == "vertex" && !seen_vertex;
      if (in_vertex) {
        if (!(ss >> count)) throw bad("bad vertex count");
        seen_vertex = true;
      }
    } else if (word == "property" && in_vertex) {
      PlyProperty p;
      ss >> p.type;
      if (p.type == "list") throw bad("list properties on vertices are not supported");
      ss >> p.name;
      if (ply_type_size(p.type) == 0) throw bad("unknown property type " + p.type);
      props.push_back(p);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!seen_vertex) throw bad("no vertex element");
  int ix = -1, iy = -1, iz = -1, ic = -1, iframe = -1;
  for (int k = 0; k < static_cast<int>(props.size()); ++k) {
    const auto& n = props[k].name;
    if (n == "x") ix = k;
    if (n == "y") iy = k;
    if (n == "z") iz = k;
    if (n == "confidence" || n == "conf") ic = k;
    if (n == "frame" || n == "source_frame") iframe = k;
  }
  if (ix < 0 || iy < 0 || iz < 0) throw bad("missing x/y/z properties");

  PointCloud cloud;
  cloud.points.reserve(count);
  if (ic >= 0) cloud.confidence.reserve(count);
  if (iframe >= 0) cloud.source_frame.reserve(count);
  std::vector<double> vals(props.size());
  const auto push = [&] {
    cloud.points.emplace_back(vals[ix], vals[iy], vals[iz]);
    if (ic >= 0) cloud.confidence.push_back(static_cast<float>(vals[ic]));
    if (iframe >= 0) cloud.source_frame.push_back(static_cast<std::uint32_t>(vals[iframe]));
  };
  if (format == "ascii") {
    for (std::size_t v = 0; v < count; ++v) {
      for (auto& x : vals) {
        if (!(in >> x)) throw bad("truncated ASCII vertex data");
      }
      push();
    }
  } else if (format == "binary_little_endian") {
    in.close();
    detail::ByteReader r(path);
    r.need(header_bytes);
    for (std::size_t k = 0; k < header_bytes; ++k) r.get<char>();
    std::size_t stride = 0;
    for (const auto& p : props) stride += ply_type_size(p.type);
    if (r.remaining() < stride * count) throw bad("truncated binary vertex data");
    for (std::size_t v = 0; v < count; ++v) {
      for (std::size_t k = 0; k < props.size(); ++k) vals[k] = ply_read_binary(r, props[k].type);
      push();
    }
  } else {
    throw bad("unsupported PLY format '" + format + "'");
  }
  try {
    cloud.validate();
  } catch (const Error& e) {
    throw bad(e.what());
  }
  return cloud;
}

PointCloud read_csv_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  PointCloud cloud;
  std::string line;
  int lineno = 0;
  int columns = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    std::vector<double> v;
    double x;
    while (ss >> x) v.push_back(x);
    if (!ss.eof()) {
      if (lineno == 1) continue;  // header row
      throw Error(ErrorCode::FormatError,
                  path.string() + ":" + std::to_string(lineno) + ": non-numeric field");
    }
    if (v.size() < 3 || v.size() > 4 || (columns >= 0 && static_cast<int>(v.size()) != columns)) {
      throw Error(ErrorCode::FormatError,
                  path.string() + ":" + std::to_string(lineno) + ": expected x,y,z[,conf]");
    }
    columns = static_cast<int>(v.size());
    cloud.points.emplace_back(v[0], v[1], v[2]);
    if (v.size() == 4) cloud.confidence.push_back(static_cast<float>(v[3]));
  }
  try {
    cloud.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
  return cloud;
}

PointCloud read_cloud(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::IoError, "missing point cloud " + path.string());
  }
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".csv") return read_csv_cloud(path);
  return read_ply(path);
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  Manifest m;
  std::string where = "submaps";
  try {
    const auto j = nlohmann::json::parse(in);
    for (std::size_t s = 0; s < j.at("submaps").size(); ++s) {
      const auto& e = j.at("submaps").at(s);
      where = "submaps[" + std::to_string(s) + "]";
      ManifestEntry entry;
      entry.id = e.at("id").get<std::int64_t>();
      entry.cloud = e.at("cloud").get<std::string>();
      if (entry.cloud.is_relative()) entry.cloud = base / entry.cloud;
      if (e.contains("transition_frame") && !e.at("transition_frame").is_null()) {
        entry.transition_frame = e.at("transition_frame").get<std::size_t>();
      }
      for (const auto& f : e.at("frames")) {
        const auto& t = f.at("t");
        const auto& q = f.at("q");
        Eigen::Quaterniond quat(q.at(0).get<double>(), q.at(1).get<double>(),
                                q.at(2).get<double>(), q.at(3).get<double>());
        if (!(quat.norm() > 0.0)) throw Error(ErrorCode::FormatError, where + ": zero quaternion");
        const double s = f.contains("s") ? f.at("s").get<double>() : 1.0;
        entry.frames.push_back(
            {f.at("timestamp").get<double>(),
             Sim3(quat.normalized(),
                  {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()}, s)});
      }
      if (entry.frames.empty()) throw Error(ErrorCode::FormatError, where + ": no frames");
      if (entry.transition_frame && *entry.transition_frame >= entry.frames.size()) {
        throw Error(ErrorCode::FormatError, where + ": transition_frame out of range");
      }
      m.submaps.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::FormatError, path.string() + " (" + where + "): " + ex.what());
  } catch (const Error& ex) {
    if (ex.code() == ErrorCode::DegenerateInput) {
      throw Error(ErrorCode::FormatError, path.string() + " (" + where + "): " + ex.what());
    }
    throw;
  }
  std::vector<std::int64_t> ids;
  for (const auto& s : m.submaps) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw Error(ErrorCode::FormatError, path.string() + ": duplicate submap id");
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest,
                    const std::filesystem::path& relative_to) {
  nlohmann::ordered_json j;
  j["submaps"] = nlohmann::ordered_json::array();
  for (const auto& s : manifest.submaps) {
    nlohmann::ordered_json e;
    e["id"] = s.id;
    const auto cloud = relative_to.empty() ? s.cloud : s.cloud.lexically_relative(relative_to);
    e["cloud"] = cloud.generic_string();
    e["transition_frame"] = s.transition_frame ? nlohmann::ordered_json(*s.transition_frame)
                                               : nlohmann::ordered_json(nullptr);
    e["frames"] = nlohmann::ordered_json::array();
    for (const auto& f : s.frames) {
      const auto& q = f.pose.rotation();
      const auto& t = f.pose.translation();
      e["frames"].push_back({{"timestamp", f.timestamp},
                             {"t", {t.x(), t.y(), t.z()}},
                             {"q", {q.w(), q.x(), q.y(), q.z()}},
                             {"s", f.pose.scale()}});
    }
    j["submaps"].push_back(std::move(e));
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(1) << '\n';
}

void save_dem_layer(const std::filesystem::path& path, const DemGrid& grid) {
  detail::ByteWriter w;
  w.bytes(kLayerMagic);
  w.f64(grid.mpp);
  w.f64(grid.bounds.u0);
  w.f64(grid.bounds.u1);
  w.f64(grid.bounds.v0);
  w.f64(grid.bounds.v1);
  w.i32(grid.width_px);
  w.i32(grid.height_px);
  w.i32(grid.tile_px);
  for (int k = 0; k < 9; ++k) w.f64(grid.frame.rotation.data()[k]);
  for (int k = 0; k < 3; ++k) w.f64(grid.frame.origin[k]);
  w.u64(grid.rejected_points);
  w.u32(static_cast<std::uint32_t>(grid.tiles.size()));
  const std::size_t cells = static_cast<std::size_t>(grid.tile_px) * grid.tile_px;
  for (const auto& [idx, tile] : grid.tiles) {
    w.i32(idx.u);
    w.i32(idx.v);
    for (std::size_t c = 0; c < cells; ++c) {
      w.u32(tile.hits[c]);
      w.f64(tile.hits[c] > 0 ? tile.height[c] : 0.0);
    }
  }
  w.save(path);
}

DemGrid load_dem_layer(const std::filesystem::path& path) {
  detail::ByteReader r(path);
  r.expect_magic(kLayerMagic);
  DemGrid g;
  g.mpp = r.f64();
  g.bounds.u0 = r.f64();
  g.bounds.u1 = r.f64();
  g.bounds.v0 = r.f64();
  g.bounds.v1 = r.f64();
  g.width_px = r.i32();
  g.height_px = r.i32();
  g.tile_px = r.i32();
  if (g.tile_px < 1 || g.width_px < 1 || g.height_px < 1 || !(g.mpp > 0.0)) {
    throw Error(ErrorCode::FormatError, r.name() + ": bad grid geometry");
  }
  for (int k = 0; k < 9; ++k) g.frame.rotation.data()[k] = r.f64();
  for (int k = 0; k < 3; ++k) g.frame.origin[k] = r.f64();
  g.rejected_points = r.u64();
  const std::uint32_t n = r.u32();
  const std::size_t cells = static_cast<std::size_t>(g.tile_px) * g.tile_px;
  for (std::uint32_t t = 0; t < n; ++t) {
    DemTile tile;
    tile.index.u = r.i32();
    tile.index.v = r.i32();
    tile.height.resize(cells);
    tile.hits.resize(cells);
    for (std::size_t c = 0; c < cells; ++c) {
      tile.hits[c] = r.u32();
      const double h = r.f64();
      tile.height[c] = tile.hits[c] > 0 ? h : kEmpty;
    }
    g.tiles.emplace(tile.index, std::move(tile));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::FormatError, r.name() + ": trailing bytes");
  return g;
}

void write_tile_png(const std::filesystem::path& png_path, const DemGrid& grid, TileIndex idx) {
  const DemTile& tile = grid.tiles.at(idx);
  const int n = grid.tile_px;
  double h_min = std::numeric_limits<double>::infinity();
  double h_max = -std::numeric_limits<double>::infinity();
  for (double h : tile.height) {
    if (is_empty(h)) continue;
    h_min = std::min(h_min, h);
    h_max = std::max(h_max, h);
  }
  const double span = h_max - h_min;
  // Image rows run top-down with increasing v, matching the grid's y index.
  std::vector<std::uint8_t> data(static_cast<std::size_t>(n) * n * 4);
  std::vector<png_bytep> rows(static_cast<std::size_t>(n));
  for (int y = 0; y < n; ++y) {
    rows[y] = data.data() + static_cast<std::size_t>(y) * n * 4;
    for (int x = 0; x < n; ++x) {
      const double h = tile.height[static_cast<std::size_t>(y) * n + x];
      std::uint16_t gray = 0;
      std::uint16_t alpha = 0;
      if (!is_empty(h)) {
        gray = static_cast<std::uint16_t>(1 + std::lround(span > 0.0 ? (h - h_min) / span * 65534.0 : 0.0));
        alpha = 65535;
      }
      std::uint8_t* px = rows[y] + static_cast<std::size_t>(x) * 4;
      px[0] = static_cast<std::uint8_t>(gray >> 8);
      px[1] = static_cast<std::uint8_t>(gray & 0xFF);
      px[2] = static_cast<std::uint8_t>(alpha >> 8);
      px[3] = static_cast<std::uint8_t>(alpha & 0xFF);
    }
  }
  write_png_rows(png_path, n, n, 16, PNG_COLOR_TYPE_GRAY_ALPHA, rows);

  nlohmann::ordered_json side;
  side["I_u"] = idx.u;
  side["I_v"] = idx.v;
  side["tile_px"] = n;
  side["mpp"] = grid.mpp;
  side["bounds"] = {grid.bounds.u0, grid.bounds.u1, grid.bounds.v0, grid.bounds.v1};
  side["h_min"] = h_min;
  side["h_max"] = h_max;
  side["frame"] = frame_to_json(grid.frame);
  auto json_path = png_path;
  json_path.replace_extension(".json");
  std::ofstream out(json_path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + json_path.string());
  out << side.dump(1) << '\n';
}

void write_png8(const std::filesystem::path& path, int width, int height, int channels,
                const std::vector<std::uint8_t>& pixels) {
  if (channels != 1 && channels != 3) throw Error(ErrorCode::ConfigError, "PNG needs 1 or 3 channels");
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    throw Error(ErrorCode::DimensionMismatch, "pixel buffer size");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[y] = const_cast<png_bytep>(pixels.data()) + static_cast<std::size_t>(y) * width * channels;
  }
  write_png_rows(path, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 rows);
}

Png16 read_png16(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::unique_ptr<FILE, int (*)(FILE*)> guard(fp, &std::fclose);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::IoError, "libpng init failed");
  }
  Png16 out;
  std::vector<std::uint8_t> data;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::FormatError, path.string() + ": not a readable PNG");
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  out.channels = png_get_channels(png, info);
  if (depth != 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::FormatError, path.string() + ": expected 16-bit PNG");
  }
  const std::size_t stride = static_cast<std::size_t>(out.width) * out.channels * 2;
  data.resize(stride * out.height);
  rows.resize(out.height);
  for (int y = 0; y < out.height; ++y) rows[y] = data.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  out.pixels.resize(data.size() / 2);
  for (std::size_t k = 0; k < out.pixels.size(); ++k) {
    out.pixels[k] = static_cast<std::uint16_t>((data[2 * k] << 8) | data[2 * k + 1]);
  }
  return out;
}

}  // namespace demslam
