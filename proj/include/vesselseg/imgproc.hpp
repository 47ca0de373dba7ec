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
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vesselseg/detail/interp.hpp"
#include "vesselseg/detail/pnm.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/raster.hpp"

namespace vesselseg {

/// Three-channel planar (CHW) float image.
class ImageTensor {
 public:
  static constexpr int kChannels = 3;

  ImageTensor() = default;
  ImageTensor(int height, int width, float fill = 0.0f) : height_(height), width_(width) {
    if (height <= 0 || width <= 0) throw ShapeError("image dimensions must be positive");
    values_.assign(static_cast<std::size_t>(kChannels) * height * width, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }

  float& at(int c, int y, int x) { return values_[offset(c, y, x)]; }
  float at(int c, int y, int x) const { return values_[offset(c, y, x)]; }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  std::span<const float> channel(int c) const {
    return std::span<const float>(values_).subspan(static_cast<std::size_t>(c) * plane_size(),
                                                   plane_size());
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t offset(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> values_;
};

struct NormalizationStats {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};

  void validate() const {
    for (float s : std) {
      if (!(s > 0.0f) || !std::isfinite(s)) throw ConfigError("normalization std must be > 0");
    }
  }
};

/// Reads an 8-bit binary RGB pixmap (P6) and scales to [0, 1].
inline ImageTensor decode_image(const std::filesystem::path& path) {
  auto pnm = detail::read_pnm(path);
  if (pnm.channels != 3) {
    throw DataError("'" + path.string() + "': expected 3 channels, found " +
                    std::to_string(pnm.channels));
  }
  ImageTensor img(pnm.height, pnm.width);
  for (int y = 0; y < pnm.height; ++y) {
    for (int x = 0; x < pnm.width; ++x) {
      const std::size_t px = (static_cast<std::size_t>(y) * pnm.width + x) * 3;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(pnm.bytes[px + c]) / 255.0f;
    }
  }
  return img;
}

/// Quantizes [0, 1] values to 8 bits (round half away from zero) and writes P6.
inline void save_image(const ImageTensor& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(img.plane_size() * 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const std::size_t px = (static_cast<std::size_t>(y) * img.width() + x) * 3;
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        bytes[px + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  detail::write_pnm(path, img.width(), img.height(), 3, bytes);
}

/// Bilinear resize with the half-pixel-center convention and border clamping.
inline ImageTensor resize_bilinear(const ImageTensor& img, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: output size must be positive");
  if (out_h == img.height() && out_w == img.width()) return img;
  const auto ty = detail::linear_taps(img.height(), out_h);
  const auto tx = detail::linear_taps(img.width(), out_w);
  ImageTensor out(out_h, out_w);
  for (int c = 0; c < ImageTensor::kChannels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const auto& vy = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const auto& vx = tx[static_cast<std::size_t>(x)];
        const double top =
            (1.0 - vx.w_hi) * img.at(c, vy.lo, vx.lo) + vx.w_hi * img.at(c, vy.lo, vx.hi);
        const double bottom =
            (1.0 - vx.w_hi) * img.at(c, vy.hi, vx.lo) + vx.w_hi * img.at(c, vy.hi, vx.hi);
        out.at(c, y, x) = static_cast<float>((1.0 - vy.w_hi) * top + vy.w_hi * bottom);
      }
    }
  }
  return out;
}

inline ImageTensor normalize(const ImageTensor& img, const NormalizationStats& stats) {
  stats.validate();
  ImageTensor out = img;
  for (int c = 0; c < ImageTensor::kChannels; ++c) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        out.at(c, y, x) = (img.at(c, y, x) - stats.mean[c]) / stats.std[c];
      }
    }
  }
  return out;
}

inline ImageTensor denormalize(const ImageTensor& img, const NormalizationStats& stats) {
  stats.validate();
  ImageTensor out = img;
  for (int c = 0; c < ImageTensor::kChannels; ++c) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        out.at(c, y, x) = img.at(c, y, x) * stats.std[c] + stats.mean[c];
      }
    }
  }
  return out;
}

struct SynthSample {
  ImageTensor image;
  Mask mask;
};

namespace detail {

inline constexpr double kMinForeground = 0.01;
inline constexpr double kMaxForeground = 0.25;

/// One attempt at a synthetic tile. Returns the foreground fraction.
inline double draw_synthetic(std::mt19937_64& rng, int h, int w, SynthSample& out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  out.mask = Mask(w, h);
  const int tubes = 1 + static_cast<int>(unit(rng) * 4.0);
  for (int t = 0; t < std::min(tubes, 4); ++t) {
    const double radius = (2 + static_cast<int>(unit(rng) * 5.0)) / 2.0;
    double px = unit(rng) * w;
    double py = unit(rng) * h;
    double heading = unit(rng) * 2.0 * std::numbers::pi;
    const int steps = static_cast<int>((0.5 + unit(rng)) * w);
    for (int s = 0; s < steps; ++s) {
      const int x0 = std::max(0, static_cast<int>(std::floor(px - radius)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(px + radius)));
      const int y0 = std::max(0, static_cast<int>(std::floor(py - radius)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(py + radius)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double dx = x + 0.5 - px, dy = y + 0.5 - py;
          if (dx * dx + dy * dy <= radius * radius) out.mask.set(x, y);
        }
      }
      heading += 0.3 * gauss(rng);
      px += std::cos(heading);
      py += std::sin(heading);
      // Bounce off the borders so the walk stays in frame.
      if (px < 0.0 || px > w) {
        heading = std::numbers::pi - heading;
        px = std::clamp(px, 0.0, static_cast<double>(w));
      }
      if (py < 0.0 || py > h) {
        heading = -heading;
        py = std::clamp(py, 0.0, static_cast<double>(h));
      }
    }
  }

  // Pale stained background with low-frequency texture; tubes drawn darker.
  std::array<double, 3> base{0.80 + 0.08 * unit(rng), 0.55 + 0.08 * unit(rng),
                             0.70 + 0.08 * unit(rng)};
  const double tube_scale = 0.55 + 0.1 * unit(rng);
  const double fx = 0.05 + 0.2 * unit(rng), fy = 0.05 + 0.2 * unit(rng);
  const double phase = unit(rng) * 2.0 * std::numbers::pi;
  out.image = ImageTensor(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double texture = 0.04 * std::sin(fx * x + fy * y + phase);
      const bool fg = out.mask(x, y) != 0;
      for (int c = 0; c < 3; ++c) {
        double v = base[static_cast<std::size_t>(c)] + texture + 0.03 * gauss(rng);
        if (fg) v *= tube_scale;
        v = std::clamp(v, 0.0, 1.0);
        // Store 8-bit quantized values so files and memory agree exactly.
        out.image.at(c, y, x) = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
      }
    }
  }
  return static_cast<double>(out.mask.popcount()) / (static_cast<double>(h) * w);
}

}  // namespace detail

/// Deterministic synthetic vessel tiles: 1-4 random-walk tubes (2-6 px thick)
/// drawn darker over a textured background. Each sample depends only on
/// (seed, index) and is redrawn until its foreground fraction is in
/// [0.01, 0.25].
inline std::vector<SynthSample> synth_vessels(std::uint64_t seed, int count, int h, int w) {
  if (h < 32 || w < 32) throw ConfigError("synth_vessels: h and w must be >= 32");
  if (count < 0) throw ConfigError("synth_vessels: count must be >= 0");
  std::vector<SynthSample> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    auto& sample = out[static_cast<std::size_t>(i)];
    for (;;) {
      const double fg = detail::draw_synthetic(rng, h, w, sample);
      if (fg >= detail::kMinForeground && fg <= detail::kMaxForeground) break;
    }
  }
  return out;
}

}  // namespace vesselseg
