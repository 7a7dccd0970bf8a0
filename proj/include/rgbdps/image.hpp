#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "rgbdps/error.hpp"

namespace rgbdps {

// Dense row-major 2-D grid. Pixel (u, v) is column u, row v; origin top-left.
template <typename T>
class Image {
 public:
  Image() = default;
  Image(int width, int height, const T& fill = T{})
      : width_(width), height_(height) {
    RGBDPS_CHECK(width >= 0 && height >= 0, "image size must be non-negative");
    data_.assign(static_cast<std::size_t>(width) * height, fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool contains(int u, int v) const {
    return u >= 0 && v >= 0 && u < width_ && v < height_;
  }
  bool same_shape(int width, int height) const {
    return width_ == width && height_ == height;
  }
  template <typename U>
  bool same_shape(const Image<U>& other) const {
    return same_shape(other.width(), other.height());
  }

  T& operator()(int u, int v) {
    return data_[static_cast<std::size_t>(v) * width_ + u];
  }
  const T& operator()(int u, int v) const {
    return data_[static_cast<std::size_t>(v) * width_ + u];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> pixels() { return data_; }
  std::span<const T> pixels() const { return data_; }

  void fill(const T& value) { std::fill(data_.begin(), data_.end(), value); }

  bool operator==(const Image&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

// Nonzero = inside the object region.
using Mask = Image<std::uint8_t>;

inline std::size_t count_set(const Mask& mask) {
  std::size_t n = 0;
  for (auto m : mask.pixels()) n += m != 0;
  return n;
}

// Keeps pixels whose (2r+1) x (2r+1) neighbourhood lies inside the mask and
// the image.
inline Mask erode(const Mask& mask, int radius) {
  if (radius <= 0) return mask;
  const int w = mask.width(), h = mask.height();
  // separable min filter: rows, then columns
  Mask rows(w, h, 0), out(w, h, 0);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      bool all = u - radius >= 0 && u + radius < w;
      for (int d = -radius; all && d <= radius; ++d) all = mask(u + d, v) != 0;
      rows(u, v) = all;
    }
  }
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      bool all = v - radius >= 0 && v + radius < h;
      for (int d = -radius; all && d <= radius; ++d) all = rows(u, v + d) != 0;
      out(u, v) = all;
    }
  }
  return out;
}

}  // namespace rgbdps
