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
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vesselseg/error.hpp"
#include "vesselseg/imgproc.hpp"
#include "vesselseg/loss.hpp"
#include "vesselseg/metrics.hpp"
#include "vesselseg/nn.hpp"
#include "vesselseg/train.hpp"

namespace vesselseg {

/// Plain-text `key = value` run configuration. Lines starting with '#' are
/// comments. Every key must be known; missing keys take their defaults.
class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> table = {
        {"data.dir", ""},
        {"data.mean", "0.485,0.456,0.406"},
        {"data.std", "0.229,0.224,0.225"},
        {"data.init_weights", ""},
        {"data.init_prefix", "encoder."},
        {"model.block_kind", "residual"},
        {"model.stage_widths", "16,32,64"},
        {"model.blocks_per_stage", "1"},
        {"model.decoder", "unet"},
        {"model.fpn_width", "32"},
        {"model.norm", "none"},
        {"model.height", "128"},
        {"model.width", "128"},
        {"loss.kind", "dice"},
        {"loss.beta", "0.9"},
        {"loss.gamma", "2.0"},
        {"loss.alpha", "0.5"},
        {"loss.epsilon_smooth", "1.0"},
        {"loss.per_image", "false"},
        {"train.batch_size", "8"},
        {"train.learning_rate", "1e-4"},
        {"train.epochs", "100"},
        {"train.seed", "0"},
        {"train.val_fraction", "0"},
        {"train.optimizer", "adam"},
        {"train.momentum", "0.0"},
        {"train.adam_beta1", "0.9"},
        {"train.adam_beta2", "0.999"},
        {"train.adam_epsilon", "1e-8"},
        {"train.checkpoint_every", "0"},
        {"train.record_wall_time", "false"},
        {"train.stop_at_val_dice", "0"},
        {"train.lr_find", "false"},
        {"train.lr_find_min", "1e-7"},
        {"train.lr_find_max", "1"},
        {"train.lr_find_steps", "100"},
        {"eval.threshold", "0.5"},
        {"eval.aggregation", "per_image"},
        {"output_dir", "runs/default"},
    };
    return table;
  }

  static RunConfig parse(std::istream& in, const std::string& source = "config") {
    RunConfig cfg;
    std::map<std::string, std::size_t> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
      }
      const std::string key = trim(t.substr(0, eq));
      if (auto [it, fresh] = seen.emplace(key, line_no); !fresh) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      }
      cfg.set(key, trim(t.substr(eq + 1)), source + ":" + std::to_string(line_no) + ": ");
    }
    cfg.check();
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    return parse(in, path.string());
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "") {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(where + "unknown config key '" + key + "'");
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  /// Converts every value once so type errors surface before any work starts.
  void check() const {
    (void)model();
    (void)train();
    (void)stats();
    (void)aggregation();
  }

  /// Every key in sorted order, one `key = value` per line.
  void write(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  }

  ModelConfig model() const {
    ModelConfig m;
    m.encoder.block_kind = choose<BlockKind>("model.block_kind", {{"residual", BlockKind::Residual},
                                                                   {"plain", BlockKind::Plain}});
    m.encoder.stage_widths.clear();
    for (double w : number_list("model.stage_widths")) m.encoder.stage_widths.push_back(static_cast<int>(w));
    m.encoder.blocks_per_stage = integer("model.blocks_per_stage");
    m.decoder = choose<DecoderKind>("model.decoder", {{"unet", DecoderKind::UNet}, {"fpn", DecoderKind::FPN}});
    m.fpn_width = integer("model.fpn_width");
    m.norm = choose<NormKind>("model.norm", {{"none", NormKind::None}, {"batchnorm", NormKind::BatchNorm}});
    m.height = integer("model.height");
    m.width = integer("model.width");
    m.seed = static_cast<std::uint64_t>(integer("train.seed"));
    m.validate();
    return m;
  }

  LossConfig loss() const {
    LossConfig l;
    l.kind = choose<LossKind>("loss.kind", {{"dice", LossKind::Dice},
                                            {"weighted_ce", LossKind::WeightedCE},
                                            {"focal", LossKind::Focal},
                                            {"bce", LossKind::BCE}});
    l.beta = number("loss.beta");
    l.gamma = number("loss.gamma");
    l.alpha = number("loss.alpha");
    l.epsilon_smooth = number("loss.epsilon_smooth");
    l.per_image = boolean("loss.per_image");
    l.validate();
    return l;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.batch_size = integer("train.batch_size");
    t.learning_rate = number("train.learning_rate");
    t.epochs = integer("train.epochs");
    t.seed = static_cast<std::uint64_t>(integer("train.seed"));
    t.loss = loss();
    t.optimizer.kind = choose<OptimizerKind>("train.optimizer", {{"adam", OptimizerKind::Adam},
                                                                  {"sgd", OptimizerKind::SGD}});
    t.optimizer.momentum = number("train.momentum");
    t.optimizer.beta1 = number("train.adam_beta1");
    t.optimizer.beta2 = number("train.adam_beta2");
    t.optimizer.epsilon = number("train.adam_epsilon");
    t.val_fraction = number("train.val_fraction");
    if (!(t.val_fraction >= 0.0 && t.val_fraction < 1.0)) {
      throw ConfigError("train.val_fraction must lie in [0, 1)");
    }
    t.checkpoint_every = integer("train.checkpoint_every");
    t.record_wall_time = boolean("train.record_wall_time");
    t.stop_at_val_dice = number("train.stop_at_val_dice");
    t.threshold = number("eval.threshold");
    t.output_dir = get("output_dir");
    t.validate();
    return t;
  }

  NormalizationStats stats() const {
    NormalizationStats s;
    const auto mean = number_list("data.mean");
    const auto std = number_list("data.std");
    if (mean.size() != 3 || std.size() != 3) throw ConfigError("data.mean and data.std need 3 values");
    for (std::size_t c = 0; c < 3; ++c) {
      s.mean[c] = static_cast<float>(mean[c]);
      s.std[c] = static_cast<float>(std[c]);
    }
    s.validate();
    return s;
  }

  Aggregation aggregation() const {
    return choose<Aggregation>("eval.aggregation", {{"per_image", Aggregation::PerImage},
                                                     {"global", Aggregation::GlobalPixels}});
  }

  double number(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
    }
  }

  long long integer(const std::string& key) const {
    const std::string& v = get(key);
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
    }
    return out;
  }

  bool boolean(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
  }

  std::vector<double> number_list(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        out.push_back(std::stod(trim(item)));
      } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "': '" + item + "' is not a number");
      }
    }
    if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
    return out;
  }

 private:
  template <typename E>
  E choose(const std::string& key, std::initializer_list<std::pair<std::string_view, E>> options) const {
    const std::string& v = get(key);
    std::string allowed;
    for (const auto& [name, value] : options) {
      if (v == name) return value;
      allowed += (allowed.empty() ? "" : "|") + std::string(name);
    }
    throw ConfigError("config key '" + key + "': '" + v + "' is not one of " + allowed);
  }

  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

}  // namespace vesselseg
