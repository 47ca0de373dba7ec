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
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "vesselseg/dataset.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/nn.hpp"
#include "vesselseg/raster.hpp"
#include "vesselseg/tensor.hpp"

namespace vesselseg {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Binarizes an H x W probability map (any leading singleton dims): a pixel
/// is set iff its probability is strictly greater than t.
template <typename T>
Mask threshold(const Tensor<T>& probs, double t) {
  if (!(t > 0.0 && t < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  const auto& s = probs.shape();
  if (s.size() < 2) throw ShapeError("threshold: expected an HxW map, got " + shape_string(s));
  for (std::size_t i = 0; i + 2 < s.size(); ++i) {
    if (s[i] != 1) throw ShapeError("threshold: expected a single map, got " + shape_string(s));
  }
  const auto H = static_cast<int>(s[s.size() - 2]);
  const auto W = static_cast<int>(s[s.size() - 1]);
  Mask m(W, H);
  auto bits = m.bits();
  for (std::size_t i = 0; i < bits.size(); ++i) {
    bits[i] = static_cast<double>(probs.data()[i]) > t ? 1 : 0;
  }
  return m;
}

inline ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) {
    throw ShapeError("confusion: prediction " + std::to_string(pred.width()) + "x" +
                     std::to_string(pred.height()) + " vs ground truth " +
                     std::to_string(gt.width()) + "x" + std::to_string(gt.height()));
  }
  ConfusionCounts c;
  auto p = pred.bits();
  auto g = gt.bits();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && g[i]) ++c.tp;
    else if (p[i]) ++c.fp;
    else if (g[i]) ++c.fn;
  }
  c.tn = p.size() - c.tp - c.fp - c.fn;
  return c;
}

/// TP / (TP + FP + FN); 1.0 when both masks are empty.
inline double iou(const ConfusionCounts& c) {
  const std::uint64_t den = c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(den);
}

/// 2TP / (2TP + FP + FN), equal to F1; 1.0 when both masks are empty.
inline double dice(const ConfusionCounts& c) {
  const std::uint64_t den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(den);
}

enum class Aggregation { PerImage, GlobalPixels };

struct ImageScore {
  std::string tile_id;
  double iou = 0.0;
  double dice = 0.0;
  ConfusionCounts counts;
};

struct MetricsReport {
  double mean_iou = 0.0;
  double mean_dice = 0.0;
  std::vector<ImageScore> per_image;
  double threshold = 0.5;
  Aggregation aggregation = Aggregation::PerImage;
};

/// Aggregates per-image scores in input order.
inline MetricsReport summarize(std::vector<ImageScore> scores, double t,
                               Aggregation aggregation = Aggregation::PerImage) {
  if (scores.empty()) throw DataError("metrics: no images to summarize");
  MetricsReport r;
  r.threshold = t;
  r.aggregation = aggregation;
  if (aggregation == Aggregation::PerImage) {
    double si = 0.0, sd = 0.0;
    for (const auto& s : scores) {
      si += s.iou;
      sd += s.dice;
    }
    r.mean_iou = si / static_cast<double>(scores.size());
    r.mean_dice = sd / static_cast<double>(scores.size());
  } else {
    ConfusionCounts pooled;
    for (const auto& s : scores) pooled += s.counts;
    r.mean_iou = iou(pooled);
    r.mean_dice = dice(pooled);
  }
  r.per_image = std::move(scores);
  return r;
}

/// Scores a B x 1 x H x W logit tensor against the batch's masks.
template <typename T>
std::vector<ImageScore> score_logits(const Tensor<T>& logits,
                                     std::span<const Sample* const> batch, double t) {
  const std::size_t B = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
  if (B != batch.size()) throw ShapeError("score_logits: batch size mismatch");
  std::vector<ImageScore> out;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<T> probs(H * W);
    for (std::size_t i = 0; i < H * W; ++i) probs[i] = stable_sigmoid(logits.data()[b * H * W + i]);
    const Mask pred = threshold(Tensor<T>::from(Shape{H, W}, std::move(probs)), t);
    const ConfusionCounts c = confusion(pred, batch[b]->mask);
    out.push_back(ImageScore{batch[b]->tile_id, iou(c), dice(c), c});
  }
  return out;
}

/// Runs the model over `data` in fixed order (sigmoid -> threshold ->
/// confusion per image) and aggregates.
template <typename T>
MetricsReport evaluate_set(Model<T>& model, std::span<const Sample> data, double t = 0.5,
                           Aggregation aggregation = Aggregation::PerImage,
                           std::size_t batch_size = 8) {
  if (data.empty()) throw DataError("evaluate_set: no data");
  if (!(t > 0.0 && t < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  NoGradGuard no_grad;
  std::vector<ImageScore> scores;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) {
      batch.push_back(&data[i]);
    }
    const Tensor<T> logits = forward(model, images_to_tensor<T>(batch), false);
    auto s = score_logits(logits, batch, t);
    scores.insert(scores.end(), s.begin(), s.end());
  }
  return summarize(std::move(scores), t, aggregation);
}

/// CSV with header `tile_id,iou,dice`, one row per image and a final
/// `__mean__` row.
inline void write_metrics_csv(std::ostream& out, const MetricsReport& report) {
  out << "tile_id,iou,dice\n";
  for (const auto& s : report.per_image) out << fmt::format("{},{:.6f},{:.6f}\n", s.tile_id, s.iou, s.dice);
  out << fmt::format("__mean__,{:.6f},{:.6f}\n", report.mean_iou, report.mean_dice);
}

}  // namespace vesselseg
