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

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <boost/crc.hpp>

#include "vesselseg/error.hpp"
#include "vesselseg/nn.hpp"
#include "vesselseg/tensor.hpp"

// Weight file layout (all integers little-endian):
//   magic "VSEGWTS\0" | u32 version | u32 count
//   count x { u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | raw data }
//   u32 CRC-32 of every preceding byte
// dtype: 1 = float32, 2 = float64.

namespace vesselseg {

static_assert(std::endian::native == std::endian::little,
              "weight files are written in host byte order, which must be little-endian");

inline constexpr char kWeightMagic[8] = {'V', 'S', 'E', 'G', 'W', 'T', 'S', '\0'};
inline constexpr std::uint32_t kWeightVersion = 1;
/// Checkpoint-only records (optimizer state) live under this name prefix and
/// are skipped by load_weights.
inline constexpr std::string_view kOptimizerPrefix = "optim/";

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::Float32 : DType::Float64;
}

inline std::size_t dtype_size(DType d) { return d == DType::Float32 ? 4 : 8; }

struct WeightRecord {
  std::string name;
  DType dtype = DType::Float32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  template <typename T>
  static WeightRecord of(std::string name, const Tensor<T>& t) {
    WeightRecord r{std::move(name), dtype_of<T>(), t.shape(), {}};
    r.bytes.resize(t.numel() * sizeof(T));
    std::memcpy(r.bytes.data(), t.data().data(), r.bytes.size());
    return r;
  }

  template <typename T>
  void copy_into(Tensor<T>& t) const {
    std::memcpy(t.mutable_data().data(), bytes.data(), bytes.size());
  }
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void put_bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string source)
      : data_(data), source_(std::move(source)) {}

  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)).data(), sizeof(U));
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > data_.size() - pos_) throw DataError("'" + source_ + "': truncated weight file");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string source_;
};

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

}  // namespace detail

inline void write_weight_file(const std::filesystem::path& path,
                              std::span<const WeightRecord> records) {
  detail::ByteWriter w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kWeightMagic), sizeof kWeightMagic));
  w.put(kWeightVersion);
  w.put(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.put(static_cast<std::uint32_t>(r.name.size()));
    w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(r.name.data()), r.name.size()));
    w.put(static_cast<std::uint8_t>(r.dtype));
    w.put(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(r.bytes);
  }
  const std::uint32_t crc = detail::crc32(w.buffer());
  w.put(crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(w.buffer().data()),
            static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<WeightRecord> read_weight_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  const std::string src = path.string();
  if (data.size() < sizeof kWeightMagic + 12) throw DataError("'" + src + "': truncated weight file");
  if (std::memcmp(data.data(), kWeightMagic, sizeof kWeightMagic) != 0) {
    throw DataError("'" + src + "': not a weight file (bad magic)");
  }
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, data.data() + data.size() - 4, 4);
  const auto body = std::span<const std::uint8_t>(data).first(data.size() - 4);
  if (detail::crc32(body) != stored_crc) throw DataError("'" + src + "': checksum mismatch (corrupted file)");

  detail::ByteReader r(body.subspan(sizeof kWeightMagic), src);
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightVersion) {
    throw DataError("'" + src + "': unsupported weight file version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<WeightRecord> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightRecord rec;
    const auto name_len = r.get<std::uint32_t>();
    auto name = r.take(name_len);
    rec.name.assign(name.begin(), name.end());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 1 && dtype != 2) {
      throw DataError("'" + src + "': parameter '" + rec.name + "' has unknown dtype tag " +
                      std::to_string(dtype));
    }
    rec.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    auto bytes = r.take(shape_numel(rec.shape) * dtype_size(rec.dtype));
    rec.bytes.assign(bytes.begin(), bytes.end());
    records.push_back(std::move(rec));
  }
  if (!r.done()) throw DataError("'" + src + "': trailing bytes after last record");
  return records;
}

template <typename T>
std::vector<WeightRecord> model_records(const Model<T>& model) {
  std::vector<WeightRecord> out;
  for (const auto& p : model.parameters()) out.push_back(WeightRecord::of(p.name, p.tensor));
  return out;
}

template <typename T>
void save_weights(const Model<T>& model, const std::filesystem::path& path) {
  write_weight_file(path, model_records(model));
}

/// Copies records into the model's parameters (running statistics included).
/// Only parameters whose name starts with `prefix` are touched; every such
/// parameter must appear in the records with an identical shape and dtype, and
/// every record under the prefix must name a model parameter.
template <typename T>
void assign_weights(Model<T>& model, std::span<const WeightRecord> records,
                    std::string_view prefix = "") {
  std::map<std::string_view, const WeightRecord*> by_name;
  for (const auto& r : records) {
    if (r.name.starts_with(kOptimizerPrefix) || !r.name.starts_with(prefix)) continue;
    if (!model.contains(r.name)) {
      throw DataError("weight file parameter '" + r.name + "' does not exist in the model");
    }
    by_name[r.name] = &r;
  }
  // Validate everything before mutating anything.
  for (const auto& p : model.parameters()) {
    if (!p.name.starts_with(prefix)) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("weight file is missing parameter '" + p.name + "'");
    const WeightRecord& r = *it->second;
    if (r.dtype != dtype_of<T>()) throw DataError("parameter '" + p.name + "': dtype mismatch");
    if (r.shape != p.tensor.shape()) {
      throw ShapeError("parameter '" + p.name + "': shape " + shape_string(r.shape) +
                       " in file, model expects " + shape_string(p.tensor.shape()));
    }
  }
  for (auto& p : model.parameters()) {
    if (p.name.starts_with(prefix)) by_name.at(p.name)->copy_into(p.tensor);
  }
}

/// Loads a weight file (or checkpoint) into the model. A non-empty prefix
/// performs a partial load, e.g. "encoder." for encoder-only initialization.
template <typename T>
void load_weights(Model<T>& model, const std::filesystem::path& path, std::string_view prefix = "") {
  const auto records = read_weight_file(path);
  assign_weights(model, records, prefix);
}

}  // namespace vesselseg
