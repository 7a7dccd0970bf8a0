#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "rgbdps/core.hpp"

namespace rgbdps::io {

namespace fs = std::filesystem;

// PFM, little-endian (scale -1.0), rows stored bottom-to-top as the format
// requires. Values are stored as float32.
void write_pfm(const fs::path& path, const Image<Vec3>& img);
void write_pfm(const fs::path& path, const Image<double>& img);
Image<Vec3> read_pfm_rgb(const fs::path& path);
Image<double> read_pfm_gray(const fs::path& path);

// Binary PGM masks: 0 = outside, 255 = inside. Any nonzero value reads as 1.
void write_pgm_mask(const fs::path& path, const Mask& mask);
Mask read_pgm_mask(const fs::path& path);

// 8-bit colour images. On read, values map to [0, 1]; with `gamma` > 0 the
// inverse power is applied so that the result is linear radiance.
Image<Vec3> read_color(const fs::path& path, double gamma = 0.0);
// Clamps to [0, 1]; optional forward gamma; unmasked pixels black.
void write_png(const fs::path& path, const Image<Vec3>& img, const Mask* mask = nullptr,
               double gamma = 0.0);
void write_ppm(const fs::path& path, const Image<Vec3>& img);

// Maps |value| / vmax through a blue-to-red ramp; unmasked pixels black.
void write_error_png(const fs::path& path, const Image<double>& values, const Mask& mask,
                     double vmax);

struct TriangleMesh {
  std::vector<Eigen::Vector3f> vertices;
  std::vector<Eigen::Vector3f> normals;  // per vertex, may be empty
  std::vector<std::array<std::int32_t, 3>> faces;
};

// Binary little-endian PLY.
void write_ply(const fs::path& path, const TriangleMesh& mesh);
TriangleMesh read_ply(const fs::path& path);

}  // namespace rgbdps::io
