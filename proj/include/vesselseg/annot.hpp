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
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vesselseg/error.hpp"

namespace vesselseg {

enum class ClassLabel { BloodVessel, Glomerulus, Unsure };

inline std::string_view to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::BloodVessel: return "blood_vessel";
    case ClassLabel::Glomerulus: return "glomerulus";
    case ClassLabel::Unsure: return "unsure";
  }
  return "?";
}

inline std::optional<ClassLabel> parse_class_label(std::string_view s) {
  if (s == "blood_vessel") return ClassLabel::BloodVessel;
  if (s == "glomerulus") return ClassLabel::Glomerulus;
  if (s == "unsure") return ClassLabel::Unsure;
  return std::nullopt;
}

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// One closed ring of one class. The closing edge (last -> first) is implicit.
struct Polygon {
  ClassLabel label = ClassLabel::BloodVessel;
  std::vector<Point> ring;
  friend bool operator==(const Polygon&, const Polygon&) = default;
};

struct AnnotationRecord {
  std::string tile_id;
  std::vector<Polygon> polygons;
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;

  bool has(ClassLabel label) const {
    return std::any_of(polygons.begin(), polygons.end(),
                       [&](const Polygon& p) { return p.label == label; });
  }
};

enum class Split { Train, Val };

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "val"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  throw DataError("unknown split tag '" + std::string(s) + "'");
}

struct IndexEntry {
  std::string tile_id;
  std::filesystem::path image_path;
  AnnotationRecord record;
  Split split = Split::Train;
};

/// Labeled tiles in lexicographic tile_id order.
struct DatasetIndex {
  std::vector<IndexEntry> entries;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(
        entries.begin(), entries.end(), [&](const IndexEntry& e) { return e.split == s; }));
  }
};

inline constexpr double kDefaultTileSize = 512.0;

namespace detail {

[[noreturn]] inline void parse_fail(std::size_t line_no, const std::string& what) {
  throw DataError("annotations line " + std::to_string(line_no) + ": " + what);
}

inline std::vector<Point> parse_ring(const nlohmann::json& ring, std::size_t line_no,
                                     double tile_size) {
  if (!ring.is_array()) parse_fail(line_no, "ring is not an array");
  std::vector<Point> pts;
  pts.reserve(ring.size());
  for (const auto& v : ring) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
      parse_fail(line_no, "vertex must be an [x, y] number pair");
    }
    Point p{v[0].get<double>(), v[1].get<double>()};
    if (!(p.x >= 0.0 && p.x <= tile_size && p.y >= 0.0 && p.y <= tile_size)) {
      parse_fail(line_no, "coordinate (" + v[0].dump() + ", " + v[1].dump() +
                              ") outside [0, " + std::to_string(static_cast<int>(tile_size)) +
                              "]");
    }
    pts.push_back(p);
  }
  if (pts.size() < 3) {
    parse_fail(line_no, "polygon has " + std::to_string(pts.size()) + " vertices, need >= 3");
  }
  return pts;
}

}  // namespace detail

/// Parses the line-delimited annotation file. Blank lines are skipped but
/// still counted for error line numbers. Each ring of an annotation entry
/// becomes its own Polygon of that entry's class.
inline std::vector<AnnotationRecord> parse_annotations(std::istream& in,
                                                       double tile_size = kDefaultTileSize) {
  std::vector<AnnotationRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      detail::parse_fail(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) detail::parse_fail(line_no, "expected an object");
    auto id = obj.find("id");
    if (id == obj.end() || !id->is_string() || id->get<std::string>().empty()) {
      detail::parse_fail(line_no, "missing or empty 'id'");
    }
    auto anns = obj.find("annotations");
    if (anns == obj.end() || !anns->is_array()) {
      detail::parse_fail(line_no, "missing 'annotations' array");
    }
    AnnotationRecord rec;
    rec.tile_id = id->get<std::string>();
    for (const auto& a : *anns) {
      if (!a.is_object()) detail::parse_fail(line_no, "annotation is not an object");
      auto type = a.find("type");
      if (type == a.end() || !type->is_string()) detail::parse_fail(line_no, "missing 'type'");
      auto label = parse_class_label(type->get<std::string>());
      if (!label) detail::parse_fail(line_no, "unknown class '" + type->get<std::string>() + "'");
      auto coords = a.find("coordinates");
      if (coords == a.end() || !coords->is_array() || coords->empty()) {
        detail::parse_fail(line_no, "missing 'coordinates'");
      }
      for (const auto& ring : *coords) {
        rec.polygons.push_back(Polygon{*label, detail::parse_ring(ring, line_no, tile_size)});
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Writes records in the same line format parse_annotations reads; each
/// Polygon is emitted as its own single-ring annotation.
inline void serialize_annotations(std::ostream& out, std::span<const AnnotationRecord> records) {
  for (const auto& rec : records) {
    nlohmann::json anns = nlohmann::json::array();
    for (const auto& poly : rec.polygons) {
      nlohmann::json ring = nlohmann::json::array();
      for (const auto& p : poly.ring) ring.push_back({p.x, p.y});
      anns.push_back({{"type", to_string(poly.label)}, {"coordinates", {ring}}});
    }
    nlohmann::json obj = {{"id", rec.tile_id}, {"annotations", anns}};
    out << obj.dump() << '\n';
  }
}

using ImageResolver =
    std::function<std::optional<std::filesystem::path>(const std::string& tile_id)>;

/// Resolver that looks for `<dir>/<tile_id><ext>`.
inline ImageResolver directory_resolver(std::filesystem::path dir, std::string ext = ".ppm") {
  return [dir = std::move(dir), ext = std::move(ext)](
             const std::string& id) -> std::optional<std::filesystem::path> {
    auto p = dir / (id + ext);
    if (std::filesystem::is_regular_file(p)) return p;
    return std::nullopt;
  };
}

/// Keeps the tiles that appear in `all_tile_ids` and own a record with at
/// least one BloodVessel polygon, sorted by tile_id. Every entry is tagged
/// Train until split_train_val runs.
inline DatasetIndex filter_labeled(std::span<const std::string> all_tile_ids,
                                   std::span<const AnnotationRecord> records,
                                   const ImageResolver& resolve_image) {
  std::set<std::string_view> known(all_tile_ids.begin(), all_tile_ids.end());
  std::map<std::string_view, const AnnotationRecord*> by_id;
  for (const auto& rec : records) {
    if (!by_id.emplace(rec.tile_id, &rec).second) {
      throw DataError("duplicate annotation record for tile '" + rec.tile_id + "'");
    }
  }
  DatasetIndex index;
  for (const auto& [id, rec] : by_id) {
    if (!known.contains(id) || !rec->has(ClassLabel::BloodVessel)) continue;
    auto image = resolve_image(rec->tile_id);
    if (!image) throw DataError("tile '" + rec->tile_id + "': image file not found");
    index.entries.push_back(IndexEntry{rec->tile_id, *image, *rec, Split::Train});
  }
  return index;
}

/// Tags round(val_fraction * N) entries as Val using a seeded permutation of
/// the (already lexicographic) entry order. Entry order is unchanged.
inline DatasetIndex split_train_val(DatasetIndex index, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in (0, 1)");
  }
  const std::size_t n = index.entries.size();
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  for (std::size_t k = 0; k < n; ++k) {
    index.entries[perm[k]].split = k < n_val ? Split::Val : Split::Train;
  }
  return index;
}

inline std::map<ClassLabel, std::size_t> class_histogram(std::span<const AnnotationRecord> records) {
  std::map<ClassLabel, std::size_t> hist{
      {ClassLabel::BloodVessel, 0}, {ClassLabel::Glomerulus, 0}, {ClassLabel::Unsure, 0}};
  for (const auto& rec : records) {
    for (const auto& p : rec.polygons) ++hist[p.label];
  }
  return hist;
}

}  // namespace vesselseg
