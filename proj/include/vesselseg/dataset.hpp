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

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vesselseg/annot.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/imgproc.hpp"
#include "vesselseg/raster.hpp"
#include "vesselseg/tensor.hpp"

// Dataset directory layout shared by ingest and synth:
//   index.csv            tile_id,image,mask,split   (paths relative to the directory)
//   images/<tile_id>.ppm 8-bit RGB
//   masks/<tile_id>.pgm  8-bit, values {0,255}

namespace vesselseg {

/// One model-ready example: a normalized image and its target mask.
struct Sample {
  std::string tile_id;
  ImageTensor image;
  Mask mask;
  Split split = Split::Train;
};

struct IndexRow {
  std::string tile_id;
  std::string image;
  std::string mask;
  Split split = Split::Train;
  friend bool operator==(const IndexRow&, const IndexRow&) = default;
};

inline constexpr std::string_view kIndexHeader = "tile_id,image,mask,split";

inline void write_index_csv(const std::filesystem::path& path, std::span<const IndexRow> rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << kIndexHeader << '\n';
  for (const auto& r : rows) {
    if (r.tile_id.find_first_of(",\n") != std::string::npos) {
      throw DataError("tile id '" + r.tile_id + "' contains a comma or newline");
    }
    out << r.tile_id << ',' << r.image << ',' << r.mask << ',' << to_string(r.split) << '\n';
  }
}

inline std::vector<IndexRow> read_index_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kIndexHeader) {
    throw DataError("'" + path.string() + "': expected header '" + std::string(kIndexHeader) + "'");
  }
  std::vector<IndexRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 4) {
      throw DataError("'" + path.string() + "' line " + std::to_string(line_no) +
                      ": expected 4 fields");
    }
    rows.push_back(IndexRow{fields[0], fields[1], fields[2], parse_split(fields[3])});
  }
  return rows;
}

/// Writes image/mask pairs plus index.csv. `images` are in [0, 1].
inline void write_dataset(const std::filesystem::path& dir, std::span<const std::string> ids,
                          std::span<const ImageTensor> images, std::span<const Mask> masks,
                          std::span<const Split> splits) {
  if (ids.size() != images.size() || ids.size() != masks.size() || ids.size() != splits.size()) {
    throw DataError("write_dataset: mismatched input lengths");
  }
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::vector<IndexRow> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    IndexRow row{ids[i], "images/" + ids[i] + ".ppm", "masks/" + ids[i] + ".pgm", splits[i]};
    save_image(images[i], dir / row.image);
    save_mask(masks[i], dir / row.mask);
    rows.push_back(std::move(row));
  }
  write_index_csv(dir / "index.csv", rows);
}

/// Loads every row of a dataset directory, resizing to height x width when
/// the stored size differs, and normalizes the images.
inline std::vector<Sample> load_dataset(const std::filesystem::path& dir,
                                        const NormalizationStats& stats, int height, int width) {
  std::vector<Sample> out;
  for (const auto& row : read_index_csv(dir / "index.csv")) {
    Sample s;
    s.tile_id = row.tile_id;
    s.split = row.split;
    ImageTensor img = decode_image(dir / row.image);
    if (img.height() != height || img.width() != width) img = resize_bilinear(img, height, width);
    s.image = normalize(img, stats);
    s.mask = load_mask(dir / row.mask);
    if (s.mask.height() != height || s.mask.width() != width) {
      s.mask = downsample_mask(s.mask, width, height);
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DataError("'" + dir.string() + "': dataset is empty");
  return out;
}

/// Stacks the selected samples' images into an N x 3 x H x W tensor.
template <typename T>
Tensor<T> images_to_tensor(std::span<const Sample* const> samples) {
  if (samples.empty()) throw ShapeError("images_to_tensor: empty batch");
  const auto H = static_cast<std::size_t>(samples[0]->image.height());
  const auto W = static_cast<std::size_t>(samples[0]->image.width());
  std::vector<T> data;
  data.reserve(samples.size() * 3 * H * W);
  for (const Sample* s : samples) {
    if (static_cast<std::size_t>(s->image.height()) != H ||
        static_cast<std::size_t>(s->image.width()) != W) {
      throw ShapeError("images_to_tensor: images differ in size");
    }
    for (float v : s->image.values()) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from(Shape{samples.size(), 3, H, W}, std::move(data));
}

template <typename T>
Tensor<T> image_to_tensor(const ImageTensor& img) {
  std::vector<T> data(img.values().begin(), img.values().end());
  return Tensor<T>::from(
      Shape{1, 3, static_cast<std::size_t>(img.height()), static_cast<std::size_t>(img.width())},
      std::move(data));
}

}  // namespace vesselseg
