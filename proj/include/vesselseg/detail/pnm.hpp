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

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "vesselseg/error.hpp"

namespace vesselseg::detail {

/// 8-bit binary portable any-map (P5 grayscale or P6 RGB).
struct PnmImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> bytes;
};

inline PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");

  auto next_token = [&]() {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = in.get();
      } else if (!std::isspace(c)) {
        break;
      }
      c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      c = in.get();
    }
    return tok;
  };

  const std::string magic = next_token();
  PnmImage img;
  if (magic == "P5") {
    img.channels = 1;
  } else if (magic == "P6") {
    img.channels = 3;
  } else {
    throw DataError("'" + path.string() + "': unsupported image format (expected binary P5/P6)");
  }
  try {
    img.width = std::stoi(next_token());
    img.height = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval != 255) {
      throw DataError("'" + path.string() + "': unsupported bit depth (maxval " +
                      std::to_string(maxval) + ")");
    }
  } catch (const std::logic_error&) {
    throw DataError("'" + path.string() + "': malformed header");
  }
  if (img.width <= 0 || img.height <= 0) throw DataError("'" + path.string() + "': empty image");
  img.bytes.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.bytes.size())) {
    throw IoError("'" + path.string() + "': truncated pixel data");
  }
  return img;
}

inline void write_pnm(const std::filesystem::path& path, int width, int height, int channels,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace vesselseg::detail
