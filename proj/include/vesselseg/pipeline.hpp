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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "vesselseg/annot.hpp"
#include "vesselseg/config.hpp"
#include "vesselseg/dataset.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/imgproc.hpp"
#include "vesselseg/metrics.hpp"
#include "vesselseg/nn.hpp"
#include "vesselseg/raster.hpp"
#include "vesselseg/train.hpp"
#include "vesselseg/weights.hpp"

// End-to-end operations behind the command-line tool.

namespace vesselseg {

struct DatasetOptions {
  int size = 128;
  double val_fraction = 0.2;
  std::uint64_t split_seed = 0;
};

struct IngestSummary {
  std::size_t total_tiles = 0;
  std::size_t retained = 0;
};

/// Annotation file + directory of `<tile_id>.ppm` tiles -> dataset directory
/// of size x size images and BloodVessel masks for the labeled tiles.
inline IngestSummary ingest_dataset(const std::filesystem::path& annotations_path,
                                    const std::filesystem::path& images_dir,
                                    const std::filesystem::path& out_dir,
                                    const DatasetOptions& opt = {}) {
  std::ifstream in(annotations_path);
  if (!in) throw IoError("cannot open '" + annotations_path.string() + "'");
  const auto records = parse_annotations(in);

  if (!std::filesystem::is_directory(images_dir)) {
    throw IoError("'" + images_dir.string() + "' is not a directory");
  }
  std::set<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(images_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") ids.insert(e.path().stem().string());
  }
  IngestSummary summary;
  summary.total_tiles = ids.size();
  // Annotated tiles without an image must surface as errors, not be dropped.
  for (const auto& r : records) ids.insert(r.tile_id);
  const std::vector<std::string> all(ids.begin(), ids.end());

  DatasetIndex index = filter_labeled(all, records, directory_resolver(images_dir));
  if (!index.entries.empty()) index = split_train_val(std::move(index), opt.val_fraction, opt.split_seed);

  std::vector<std::string> out_ids;
  std::vector<ImageTensor> images;
  std::vector<Mask> masks;
  std::vector<Split> splits;
  for (const auto& e : index.entries) {
    try {
      const ImageTensor img = decode_image(e.image_path);
      const Mask full = build_class_mask(e.record, ClassLabel::BloodVessel, img.width(), img.height());
      images.push_back(resize_bilinear(img, opt.size, opt.size));
      masks.push_back(downsample_mask(full, opt.size, opt.size));
    } catch (const Error& err) {
      throw DataError("tile '" + e.tile_id + "': " + err.what());
    }
    out_ids.push_back(e.tile_id);
    splits.push_back(e.split);
  }
  write_dataset(out_dir, out_ids, images, masks, splits);
  summary.retained = out_ids.size();
  return summary;
}

/// Synthetic dataset with ids synth_0000, synth_0001, ...
inline void synth_dataset(std::uint64_t seed, int count, const std::filesystem::path& out_dir,
                          const DatasetOptions& opt = {}) {
  if (count <= 0) throw ConfigError("synth: count must be >= 1");
  auto samples = synth_vessels(seed, count, opt.size, opt.size);
  DatasetIndex index;
  std::vector<std::string> ids;
  for (int i = 0; i < count; ++i) {
    ids.push_back(fmt::format("synth_{:04d}", i));
    index.entries.push_back(IndexEntry{ids.back(), {}, {}, Split::Train});
  }
  if (count > 1) index = split_train_val(std::move(index), opt.val_fraction, opt.split_seed);
  std::vector<ImageTensor> images;
  std::vector<Mask> masks;
  std::vector<Split> splits;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    images.push_back(std::move(samples[i].image));
    masks.push_back(std::move(samples[i].mask));
    splits.push_back(index.entries[i].split);
  }
  write_dataset(out_dir, ids, images, masks, splits);
}

/// Loads the dataset named by `data.dir` and, when train.val_fraction > 0,
/// re-tags it with a seeded split; otherwise the index.csv tags are used.
inline std::vector<Sample> load_run_dataset(const RunConfig& cfg) {
  const auto mc = cfg.model();
  const std::filesystem::path dir = cfg.get("data.dir");
  if (dir.empty()) throw ConfigError("data.dir is required");
  auto samples = load_dataset(dir, cfg.stats(), mc.height, mc.width);
  const auto tc = cfg.train();
  if (tc.val_fraction > 0.0) {
    DatasetIndex index;
    for (const auto& s : samples) index.entries.push_back(IndexEntry{s.tile_id, {}, {}, Split::Train});
    index = split_train_val(std::move(index), tc.val_fraction, tc.seed);
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i].split = index.entries[i].split;
  }
  return samples;
}

struct RunResult {
  TrainResult training;
  std::optional<LrRangeResult> lr_range;
};

/// cmd_train body: writes the resolved config, optionally runs the range
/// test, trains, and leaves curves.csv and checkpoints in output_dir.
inline RunResult run_training(const RunConfig& cfg,
                              const std::function<void(const EpochReport&)>& on_epoch = {},
                              std::ostream* log = nullptr) {
  const TrainConfig tc = cfg.train();
  if (tc.output_dir.empty()) throw ConfigError("output_dir is required");
  const auto samples = load_run_dataset(cfg);

  std::filesystem::create_directories(tc.output_dir);
  {
    std::ofstream out(tc.output_dir / "config.resolved.cfg", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write resolved config to '" + tc.output_dir.string() + "'");
    cfg.write(out);
  }

  Model<float> model(cfg.model());
  if (const auto& init = cfg.get("data.init_weights"); !init.empty()) {
    load_weights(model, init, cfg.get("data.init_prefix"));
  }

  RunResult result;
  if (cfg.boolean("train.lr_find")) {
    std::vector<Sample> train_only;
    for (const auto& s : samples) {
      if (s.split == Split::Train) train_only.push_back(s);
    }
    if (train_only.empty()) throw DataError("train: the Train split is empty");
    result.lr_range = lr_range_test(model, std::span<const Sample>(train_only), tc,
                                    cfg.number("train.lr_find_min"), cfg.number("train.lr_find_max"),
                                    static_cast<int>(cfg.integer("train.lr_find_steps")));
    std::ofstream out(tc.output_dir / "lr_range.csv", std::ios::binary | std::ios::trunc);
    out << "step,lr,loss,smoothed_loss\n";
    for (std::size_t i = 0; i < result.lr_range->learning_rates.size(); ++i) {
      out << fmt::format("{},{:.6e},{:.8f},{:.8f}\n", i, result.lr_range->learning_rates[i],
                         result.lr_range->losses[i], result.lr_range->smoothed[i]);
    }
    if (log) *log << fmt::format("lr range test: suggested lr {:.3e}\n", result.lr_range->suggested_lr);
  }
  result.training = train(model, std::span<const Sample>(samples), tc, on_epoch);
  return result;
}

enum class EvalSplit { All, Train, Val };

inline MetricsReport evaluate_checkpoint(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                         const std::filesystem::path& dataset_dir, double t,
                                         EvalSplit which = EvalSplit::All) {
  const auto mc = cfg.model();
  Model<float> model(mc);
  load_weights(model, checkpoint);
  auto samples = load_dataset(dataset_dir, cfg.stats(), mc.height, mc.width);
  if (which != EvalSplit::All) {
    const Split keep = which == EvalSplit::Train ? Split::Train : Split::Val;
    std::erase_if(samples, [&](const Sample& s) { return s.split != keep; });
  }
  return evaluate_set(model, std::span<const Sample>(samples), t, cfg.aggregation());
}

/// Writes the thresholded mask and the 8-bit probability map (round(p * 255)).
inline void predict_file(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                         const std::filesystem::path& image_path,
                         const std::filesystem::path& mask_out,
                         const std::filesystem::path& prob_out, double t) {
  const auto mc = cfg.model();
  Model<float> model(mc);
  load_weights(model, checkpoint);
  const ImageTensor img = decode_image(image_path);
  if (img.height() != mc.height || img.width() != mc.width) {
    throw ShapeError("image '" + image_path.string() + "' is " + std::to_string(img.width()) + "x" +
                     std::to_string(img.height()) + ", model expects " + std::to_string(mc.width) +
                     "x" + std::to_string(mc.height));
  }
  const auto [probs, mask] = predict(model, normalize(img, cfg.stats()), t);
  save_mask(mask, mask_out);
  std::vector<std::uint8_t> bytes(probs.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(static_cast<double>(probs.data()[i]) * 255.0));
  }
  detail::write_pnm(prob_out, mc.width, mc.height, 1, bytes);
}

}  // namespace vesselseg
