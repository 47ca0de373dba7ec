// Copyright 2026 The vesselseg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vesselseg/annot.hpp"
#include "vesselseg/detail/pnm.hpp"
#include "vesselseg/error.hpp"

namespace vesselseg {

/// Binary H x W grid, row-major, one byte per pixel holding 0 or 1.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height) : width_(width), height_(height) {
    if (width <= 0 || height <= 0) throw ShapeError("mask dimensions must be positive");
    bits_.assign(static_cast<std::size_t>(width) * height, 0);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return bits_.size(); }

  std::uint8_t operator()(int x, int y) const { return bits_[index(x, y)]; }
  void set(int x, int y, bool on = true) { bits_[index(x, y)] = on ? 1 : 0; }

  std::span<const std::uint8_t> bits() const { return bits_; }
  std::span<std::uint8_t> bits() { return bits_; }

  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  Mask& operator|=(const Mask& other) {
    if (other.width_ != width_ || other.height_ != height_) {
      throw ShapeError("mask OR: dimension mismatch");
    }
    for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] |= other.bits_[i];
    return *this;
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

inline double signed_area(std::span<const Point> ring) {
  double twice = 0.0;
  const std::size_t n = ring.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    twice += ring[j].x * ring[i].y - ring[i].x * ring[j].y;
  }
  return 0.5 * twice;
}

namespace detail {

inline bool on_segment(const Point& a, const Point& b, double px, double py) {
  if (px < std::min(a.x, b.x) || px > std::max(a.x, b.x)) return false;
  if (py < std::min(a.y, b.y) || py > std::max(a.y, b.y)) return false;
  return (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x) == 0.0;
}

}  // namespace detail

/// Fill convention: pixel (x, y) is set iff its center (x + 0.5, y + 0.5) is
/// inside the ring under the even-odd rule and does not lie on any edge.
///
/// Scanline fill: per row, crossings are taken with the half-open rule
/// (exactly one endpoint strictly above the center line) and pixels between
/// alternate crossings are set. A second pass clears centers lying exactly on
/// an edge.
inline Mask rasterize_polygon(const Polygon& polygon, int width, int height) {
  const auto& ring = polygon.ring;
  if (ring.size() < 3) throw DataError("polygon has fewer than 3 vertices");
  if (signed_area(ring) == 0.0) throw DataError("degenerate polygon (zero area)");

  Mask mask(width, height);
  const std::size_t n = ring.size();

  double min_y = ring[0].y, max_y = ring[0].y;
  for (const auto& p : ring) {
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const int row_lo = std::max(0, static_cast<int>(std::floor(min_y - 0.5)));
  const int row_hi = std::min(height - 1, static_cast<int>(std::ceil(max_y - 0.5)));

  std::vector<double> xs;
  for (int row = row_lo; row <= row_hi; ++row) {
    const double py = row + 0.5;
    xs.clear();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const double xi = ring[i].x, yi = ring[i].y;
      const double xj = ring[j].x, yj = ring[j].y;
      if ((yi > py) != (yj > py)) xs.push_back((xj - xi) * (py - yi) / (yj - yi) + xi);
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // Centers c with xs[k] <= c < xs[k + 1] have an odd crossing count.
      const double a = xs[k], b = xs[k + 1];
      if (a >= width || b <= 0.0) continue;
      int first = 0;
      if (a > 0.0) {
        first = static_cast<int>(std::ceil(a - 0.5));
        while (first + 0.5 < a) ++first;
        while (first > 0 && first - 0.5 >= a) --first;
      }
      for (int col = first; col < width && col + 0.5 < b; ++col) mask.set(col, row);
    }
  }

  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point& a = ring[j];
    const Point& b = ring[i];
    const int lo = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - 0.5)));
    const int hi = std::min(height - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) - 0.5)));
    for (int row = lo; row <= hi; ++row) {
      const double py = row + 0.5;
      int c0, c1;
      if (a.y == b.y) {
        c0 = static_cast<int>(std::floor(std::clamp(std::min(a.x, b.x), -4.0, width + 4.0) - 0.5)) - 1;
        c1 = static_cast<int>(std::ceil(std::clamp(std::max(a.x, b.x), -4.0, width + 4.0) - 0.5)) + 1;
      } else {
        const double x_est =
            std::clamp(a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y), -4.0, width + 4.0);
        c0 = static_cast<int>(std::floor(x_est - 0.5)) - 1;
        c1 = c0 + 3;
      }
      for (int col = std::max(c0, 0); col <= std::min(c1, width - 1); ++col) {
        if (mask(col, row) && detail::on_segment(a, b, col + 0.5, py)) mask.set(col, row, false);
      }
    }
  }
  return mask;
}

/// Union of every polygon of `label` in the record. Multiple rings are
/// unioned; there are no holes.
inline Mask build_class_mask(const AnnotationRecord& record, ClassLabel label, int width,
                             int height) {
  Mask mask(width, height);
  for (const auto& poly : record.polygons) {
    if (poly.label == label) mask |= rasterize_polygon(poly, width, height);
  }
  return mask;
}

/// Nearest-neighbour resampling at output pixel centers: output column j reads
/// source column floor((j + 0.5) * in / out).
inline Mask downsample_mask(const Mask& mask, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw ShapeError("downsample_mask: zero output dimension");
  if (out_w > mask.width() || out_h > mask.height()) {
    throw ShapeError("downsample_mask: output " + std::to_string(out_w) + "x" +
                     std::to_string(out_h) + " larger than input " + std::to_string(mask.width()) +
                     "x" + std::to_string(mask.height()));
  }
  auto source = [](int j, int in, int out) {
    return static_cast<int>((2LL * j + 1) * in / (2LL * out));
  };
  Mask out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const int sy = source(y, mask.height(), out_h);
    for (int x = 0; x < out_w; ++x) {
      if (mask(source(x, mask.width(), out_w), sy)) out.set(x, y);
    }
  }
  return out;
}

/// Writes an 8-bit PGM with 0 -> 0 and 1 -> 255.
inline void save_mask(const Mask& mask, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(mask.bits().begin(), mask.bits().end());
  for (auto& b : bytes) b = b ? 255 : 0;
  detail::write_pnm(path, mask.width(), mask.height(), 1, bytes);
}

inline Mask load_mask(const std::filesystem::path& path) {
  auto img = detail::read_pnm(path);
  if (img.channels != 1) throw DataError("'" + path.string() + "': mask must be single-channel");
  Mask mask(img.width, img.height);
  auto bits = mask.bits();
  for (std::size_t i = 0; i < img.bytes.size(); ++i) {
    const auto v = img.bytes[i];
    if (v != 0 && v != 255) {
      throw DataError("'" + path.string() + "': non-binary mask value " + std::to_string(v) +
                      " at pixel " + std::to_string(i));
    }
    bits[i] = v ? 1 : 0;
  }
  return mask;
}

}  // namespace vesselseg
