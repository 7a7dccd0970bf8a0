#include "rgbdps/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <png.h>

namespace rgbdps::io {

static_assert(std::endian::native == std::endian::little,
              "binary writers assume a little-endian host");

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return in;
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

int header_int(std::istream& in, const fs::path& path) {
  const std::string tok = header_token(in);
  try {
    return std::stoi(tok);
  } catch (const std::exception&) {
    throw ValidationError(path.string() + ": malformed header");
  }
}

struct RawPfm {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;  // top-to-bottom, interleaved
};

RawPfm read_pfm(const fs::path& path) {
  auto in = open_in(path);
  RawPfm raw;
  const std::string magic = header_token(in);
  if (magic == "PF") {
    raw.channels = 3;
  } else if (magic == "Pf") {
    raw.channels = 1;
  } else {
    throw ValidationError(path.string() + ": not a PFM file");
  }
  raw.width = header_int(in, path);
  raw.height = header_int(in, path);
  const std::string scale_tok = header_token(in);
  double scale = 0.0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    throw ValidationError(path.string() + ": malformed PFM scale");
  }
  if (raw.width <= 0 || raw.height <= 0) {
    throw ValidationError(path.string() + ": bad PFM size");
  }
  const bool big_endian = scale > 0.0;
  const std::size_t row = static_cast<std::size_t>(raw.width) * raw.channels;
  raw.data.resize(row * raw.height);
  std::vector<float> buf(row);
  for (int r = 0; r < raw.height; ++r) {
    in.read(reinterpret_cast<char*>(buf.data()), row * sizeof(float));
    if (!in) throw ValidationError(path.string() + ": truncated PFM data");
    if (big_endian) {
      for (auto& f : buf) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
    }
    const int v = raw.height - 1 - r;
    std::copy(buf.begin(), buf.end(), raw.data.begin() + v * row);
  }
  return raw;
}

void write_raw_pfm(const fs::path& path, int w, int h, int channels,
                   const std::vector<float>& data) {
  auto out = open_out(path);
  out << (channels == 3 ? "PF" : "Pf") << "\n" << w << " " << h << "\n-1.0\n";
  const std::size_t row = static_cast<std::size_t>(w) * channels;
  for (int v = h - 1; v >= 0; --v) {
    out.write(reinterpret_cast<const char*>(data.data() + v * row), row * sizeof(float));
  }
  if (!out) throw ValidationError("failed writing " + path.string());
}

}  // namespace

void write_pfm(const fs::path& path, const Image<Vec3>& img) {
  std::vector<float> data(img.size() * 3);
  for (std::size_t i = 0; i < img.size(); ++i) {
    for (int c = 0; c < 3; ++c) data[3 * i + c] = static_cast<float>(img[i][c]);
  }
  write_raw_pfm(path, img.width(), img.height(), 3, data);
}

void write_pfm(const fs::path& path, const Image<double>& img) {
  std::vector<float> data(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) data[i] = static_cast<float>(img[i]);
  write_raw_pfm(path, img.width(), img.height(), 1, data);
}

Image<Vec3> read_pfm_rgb(const fs::path& path) {
  const RawPfm raw = read_pfm(path);
  Image<Vec3> img(raw.width, raw.height);
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (raw.channels == 3) {
      img[i] = Vec3(raw.data[3 * i], raw.data[3 * i + 1], raw.data[3 * i + 2]);
    } else {
      img[i] = Vec3::Constant(raw.data[i]);
    }
  }
  return img;
}

Image<double> read_pfm_gray(const fs::path& path) {
  const RawPfm raw = read_pfm(path);
  if (raw.channels != 1) throw ValidationError(path.string() + ": expected a 1-channel PFM");
  Image<double> img(raw.width, raw.height);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = raw.data[i];
  return img;
}

void write_pgm_mask(const fs::path& path, const Mask& mask) {
  auto out = open_out(path);
  out << "P5\n" << mask.width() << " " << mask.height() << "\n255\n";
  for (auto m : mask.pixels()) out.put(m ? static_cast<char>(255) : 0);
  if (!out) throw ValidationError("failed writing " + path.string());
}

Mask read_pgm_mask(const fs::path& path) {
  auto in = open_in(path);
  if (header_token(in) != "P5") throw ValidationError(path.string() + ": not a binary PGM");
  const int w = header_int(in, path);
  const int h = header_int(in, path);
  const int maxval = header_int(in, path);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw ValidationError(path.string() + ": unsupported PGM header");
  }
  Mask mask(w, h, 0);
  std::vector<char> buf(mask.size());
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!in) throw ValidationError(path.string() + ": truncated PGM data");
  for (std::size_t i = 0; i < buf.size(); ++i) mask[i] = buf[i] != 0;
  return mask;
}

namespace {

double to_linear(std::uint8_t v, double gamma) {
  const double x = v / 255.0;
  return gamma > 0.0 ? std::pow(x, gamma) : x;
}

std::uint8_t to_byte(double x, double gamma) {
  x = std::clamp(std::isfinite(x) ? x : 0.0, 0.0, 1.0);
  if (gamma > 0.0) x = std::pow(x, 1.0 / gamma);
  return static_cast<std::uint8_t>(std::lround(x * 255.0));
}

Image<Vec3> read_ppm(const fs::path& path, double gamma) {
  auto in = open_in(path);
  if (header_token(in) != "P6") throw ValidationError(path.string() + ": not a binary PPM");
  const int w = header_int(in, path);
  const int h = header_int(in, path);
  const int maxval = header_int(in, path);
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw ValidationError(path.string() + ": unsupported PPM header");
  }
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw ValidationError(path.string() + ": truncated PPM data");
  Image<Vec3> img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = Vec3(to_linear(buf[3 * i], gamma), to_linear(buf[3 * i + 1], gamma),
                  to_linear(buf[3 * i + 2], gamma));
  }
  return img;
}

Image<Vec3> read_png(const fs::path& path, double gamma) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ValidationError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ValidationError(path.string() + ": " + image.message);
  }
  Image<Vec3> img(static_cast<int>(image.width), static_cast<int>(image.height));
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = Vec3(to_linear(buf[3 * i], gamma), to_linear(buf[3 * i + 1], gamma),
                  to_linear(buf[3 * i + 2], gamma));
  }
  return img;
}

void write_png_bytes(const fs::path& path, int w, int h, const std::vector<std::uint8_t>& rgb) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    throw ValidationError(path.string() + ": " + image.message);
  }
}

}  // namespace

Image<Vec3> read_color(const fs::path& path, double gamma) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  if (ext == ".pfm") return read_pfm_rgb(path);
  if (ext == ".png") return read_png(path, gamma);
  if (ext == ".ppm") return read_ppm(path, gamma);
  throw ValidationError(path.string() + ": unsupported colour image format");
}

void write_png(const fs::path& path, const Image<Vec3>& img, const Mask* mask, double gamma) {
  std::vector<std::uint8_t> rgb(img.size() * 3, 0);
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    for (int c = 0; c < 3; ++c) rgb[3 * i + c] = to_byte(img[i][c], gamma);
  }
  write_png_bytes(path, img.width(), img.height(), rgb);
}

void write_ppm(const fs::path& path, const Image<Vec3>& img) {
  auto out = open_out(path);
  out << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  for (const auto& p : img.pixels()) {
    for (int c = 0; c < 3; ++c) out.put(static_cast<char>(to_byte(p[c], 0.0)));
  }
}

void write_error_png(const fs::path& path, const Image<double>& values, const Mask& mask,
                     double vmax) {
  std::vector<std::uint8_t> rgb(values.size() * 3, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask[i]) continue;
    const double t = std::clamp(std::abs(values[i]) / std::max(vmax, 1e-12), 0.0, 1.0);
    // blue -> cyan -> yellow -> red
    const double r = std::clamp(2.0 * t - 0.5, 0.0, 1.0);
    const double g = std::clamp(1.5 - std::abs(4.0 * t - 2.0), 0.0, 1.0);
    const double b = std::clamp(1.5 - 2.0 * t, 0.0, 1.0);
    rgb[3 * i] = to_byte(r, 0.0);
    rgb[3 * i + 1] = to_byte(g, 0.0);
    rgb[3 * i + 2] = to_byte(b, 0.0);
  }
  write_png_bytes(path, values.width(), values.height(), rgb);
}

void write_ply(const fs::path& path, const TriangleMesh& mesh) {
  const bool with_normals = !mesh.normals.empty();
  if (with_normals && mesh.normals.size() != mesh.vertices.size()) {
    throw ValidationError("ply: normal count differs from vertex count");
  }
  auto out = open_out(path);
  out << "ply\nformat binary_little_endian 1.0\n"
      << "element vertex " << mesh.vertices.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (with_normals) out << "property float nx\nproperty float ny\nproperty float nz\n";
  out << "element face " << mesh.faces.size() << "\n"
      << "property list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    out.write(reinterpret_cast<const char*>(mesh.vertices[i].data()), 3 * sizeof(float));
    if (with_normals) {
      out.write(reinterpret_cast<const char*>(mesh.normals[i].data()), 3 * sizeof(float));
    }
  }
  for (const auto& f : mesh.faces) {
    out.put(3);
    out.write(reinterpret_cast<const char*>(f.data()), 3 * sizeof(std::int32_t));
  }
  if (!out) throw ValidationError("failed writing " + path.string());
}

TriangleMesh read_ply(const fs::path& path) {
  auto in = open_in(path);
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw ValidationError(path.string() + ": not a PLY file");
  std::size_t nv = 0, nf = 0;
  int vertex_props = 0;
  std::string element;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian") {
        throw ValidationError(path.string() + ": only binary little-endian PLY is supported");
      }
    } else if (key == "element") {
      ls >> element;
      if (element == "vertex") ls >> nv;
      if (element == "face") ls >> nf;
    } else if (key == "property" && element == "vertex") {
      std::string type;
      ls >> type;
      if (type != "float") throw ValidationError(path.string() + ": unsupported vertex property");
      ++vertex_props;
    } else if (key == "end_header") {
      break;
    }
  }
  if (vertex_props != 3 && vertex_props != 6) {
    throw ValidationError(path.string() + ": unexpected vertex layout");
  }
  TriangleMesh mesh;
  mesh.vertices.resize(nv);
  if (vertex_props == 6) mesh.normals.resize(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    in.read(reinterpret_cast<char*>(mesh.vertices[i].data()), 3 * sizeof(float));
    if (vertex_props == 6) {
      in.read(reinterpret_cast<char*>(mesh.normals[i].data()), 3 * sizeof(float));
    }
  }
  mesh.faces.resize(nf);
  for (auto& f : mesh.faces) {
    const int count = in.get();
    if (count != 3) throw ValidationError(path.string() + ": only triangles are supported");
    in.read(reinterpret_cast<char*>(f.data()), 3 * sizeof(std::int32_t));
  }
  if (!in) throw ValidationError(path.string() + ": truncated PLY data");
  return mesh;
}

}  // namespace rgbdps::io
