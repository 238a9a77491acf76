#pragma once

// File formats: point clouds (binary PLY, CSV), the submap manifest, DEM
// layers and tiles, and PNG images.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "demslam/dem.hpp"
#include "demslam/geometry.hpp"

namespace demslam {

/// Binary little-endian PLY with float x, y, z and optional float
/// "confidence" and uint "frame" vertex properties. ASCII PLY is accepted on
/// read.
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);

/// One "x,y,z[,conf]" row per point; a non-numeric first line is a header.
PointCloud read_csv_cloud(const std::filesystem::path& path);

/// Dispatches on the extension (.ply or .csv).
PointCloud read_cloud(const std::filesystem::path& path);

struct ManifestEntry {
  std::int64_t id{0};
  std::filesystem::path cloud;  // resolved against the manifest directory
  std::optional<std::size_t> transition_frame;
  std::vector<Frame> frames;
};

struct Manifest {
  std::vector<ManifestEntry> submaps;
};

/// {"submaps": [{"id", "cloud", "transition_frame", "frames": [{"timestamp",
/// "t": [x,y,z], "q": [w,x,y,z], "s"}]}]}. Relative cloud paths are resolved
/// against the manifest's directory. Throws FormatError with the offending
/// field named.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest,
                    const std::filesystem::path& relative_to = {});

/// Exact binary dump of one height layer ("DEMLYR1\0"): grid geometry,
/// frame, and every stored tile with heights and hit counts.
void save_dem_layer(const std::filesystem::path& path, const DemGrid& grid);
DemGrid load_dem_layer(const std::filesystem::path& path);

/// 16-bit gray + alpha tile PNG: valid cells hold
/// 1 + round((h - h_min) / (h_max - h_min) * 65534) with alpha 65535; EMPTY
/// cells are gray 0, alpha 0. Writes the JSON sidecar next to it.
void write_tile_png(const std::filesystem::path& png_path, const DemGrid& grid, TileIndex tile);

/// 8-bit grayscale (channels = 1) or RGB (channels = 3) PNG, row-major.
void write_png8(const std::filesystem::path& path, int width, int height, int channels,
                const std::vector<std::uint8_t>& pixels);

struct Png16 {
  int width{0};
  int height{0};
  int channels{0};
  std::vector<std::uint16_t> pixels;
};
Png16 read_png16(const std::filesystem::path& path);

}  // namespace demslam
