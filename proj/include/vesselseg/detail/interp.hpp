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
#include <vector>

namespace vesselseg::detail {

/// Two-tap linear interpolation weights for one output coordinate.
struct LinearTap {
  int lo = 0;
  int hi = 0;
  double w_hi = 0.0;
};

/// Half-pixel-center sampling: output j reads source (j + 0.5) * in / out - 0.5,
/// clamped to [0, in - 1].
inline std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  for (int j = 0; j < out; ++j) {
    double src = (j + 0.5) * in / out - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(j)] = LinearTap{lo, hi, src - lo};
  }
  return taps;
}

}  // namespace vesselseg::detail
