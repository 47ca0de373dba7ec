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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vesselseg/error.hpp"
#include "vesselseg/tensor.hpp"

namespace vesselseg {

enum class BlockKind { Plain, Residual };
enum class DecoderKind { UNet, FPN };
enum class NormKind { None, BatchNorm };

struct EncoderConfig {
  BlockKind block_kind = BlockKind::Residual;
  /// Output channels of each stage; stage s > 0 starts with a 2x2 max pool.
  std::vector<int> stage_widths{16, 32, 64};
  int blocks_per_stage = 1;
};

/// Variance gain of the output layer; initial logits sit near 0.
inline constexpr double kHeadGain = 0.01;

struct ModelConfig {
  EncoderConfig encoder;
  DecoderKind decoder = DecoderKind::UNet;
  int fpn_width = 32;
  NormKind norm = NormKind::None;
  int in_channels = 3;
  int height = 128;
  int width = 128;
  std::uint64_t seed = 0;

  std::size_t stages() const { return encoder.stage_widths.size(); }

  void validate() const {
    if (stages() < 2) throw ConfigError("model: encoder needs at least 2 stages");
    for (int w : encoder.stage_widths) {
      if (w <= 0) throw ConfigError("model: stage widths must be positive");
    }
    if (encoder.blocks_per_stage < 1) throw ConfigError("model: blocks_per_stage must be >= 1");
    if (in_channels <= 0) throw ConfigError("model: in_channels must be positive");
    if (decoder == DecoderKind::FPN && fpn_width <= 0) {
      throw ConfigError("model: fpn_width must be positive for the FPN decoder");
    }
    const int factor = 1 << (stages() - 1);
    if (height <= 0 || width <= 0 || height % factor || width % factor) {
      throw ConfigError("model: input " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be divisible by " + std::to_string(factor));
    }
  }
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
struct BlockParams {
  ConvParams<T> conv1;
  ConvParams<T> conv2;
  std::optional<ConvParams<T>> projection;
  std::optional<NormParams<T>> norm1;
  std::optional<NormParams<T>> norm2;
};

namespace detail {

template <typename T>
Tensor<T> conv_norm(const Tensor<T>& x, const ConvParams<T>& conv,
                    const std::optional<NormParams<T>>& norm, bool training) {
  const std::size_t k = conv.weight.dim(2);
  Tensor<T> h = conv2d(x, conv.weight, conv.bias, 1, k / 2);
  if (norm) {
    auto n = *norm;
    h = batchnorm(h, n.gamma, n.beta, n.running_mean, n.running_var, BatchNormOptions{training});
  }
  return h;
}

}  // namespace detail

/// relu(F(x) + shortcut(x)) with F = conv3x3 -> relu -> conv3x3. The shortcut
/// is the identity, or a 1x1 projection when channel counts differ.
template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const BlockParams<T>& p, bool training = false) {
  Tensor<T> h = relu(detail::conv_norm(x, p.conv1, p.norm1, training));
  h = detail::conv_norm(h, p.conv2, p.norm2, training);
  if (p.projection) {
    return relu(add(h, conv2d(x, p.projection->weight, p.projection->bias)));
  }
  return relu(add(h, x));
}

template <typename T>
Tensor<T> plain_block(const Tensor<T>& x, const BlockParams<T>& p, bool training = false) {
  Tensor<T> h = relu(detail::conv_norm(x, p.conv1, p.norm1, training));
  return relu(detail::conv_norm(h, p.conv2, p.norm2, training));
}

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Encoder/decoder segmentation network producing one logit channel at the
/// input resolution. Parameters are stored by name in creation order; running
/// batch-norm statistics are stored alongside but do not take gradients.
/// Copying a Model deep-copies its parameters.
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig config);

  Model(const Model& other) : config_(other.config_) {
    for (const auto& p : other.params_) add_param(p.name, p.tensor.clone());
  }
  Model& operator=(const Model& other) {
    if (this != &other) *this = Model(other);
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::span<const NamedParam<T>> parameters() const { return params_; }
  std::span<NamedParam<T>> parameters() { return params_; }

  bool contains(std::string_view name) const { return lookup_.find(std::string(name)) != lookup_.end(); }

  const Tensor<T>& param(std::string_view name) const { return params_[index_of(name)].tensor; }
  Tensor<T>& param(std::string_view name) { return params_[index_of(name)].tensor; }

  /// Number of trainable scalars.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (p.tensor.requires_grad()) n += p.tensor.numel();
    }
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  BlockParams<T> block(const std::string& prefix) const {
    BlockParams<T> b{conv(prefix + ".conv1"), conv(prefix + ".conv2"), std::nullopt, std::nullopt,
                     std::nullopt};
    if (contains(prefix + ".proj.weight")) b.projection = conv(prefix + ".proj");
    if (contains(prefix + ".bn1.gamma")) {
      b.norm1 = norm(prefix + ".bn1");
      b.norm2 = norm(prefix + ".bn2");
    }
    return b;
  }

  ConvParams<T> conv(const std::string& prefix) const {
    return {param(prefix + ".weight"), param(prefix + ".bias")};
  }

  NormParams<T> norm(const std::string& prefix) const {
    return {param(prefix + ".gamma"), param(prefix + ".beta"), param(prefix + ".running_mean"),
            param(prefix + ".running_var")};
  }

 private:
  std::size_t index_of(std::string_view name) const {
    auto it = lookup_.find(std::string(name));
    if (it == lookup_.end()) throw DataError("model has no parameter '" + std::string(name) + "'");
    return it->second;
  }

  void add_param(std::string name, Tensor<T> t) {
    if (!lookup_.emplace(name, params_.size()).second) {
      throw Error("duplicate parameter name '" + name + "'");
    }
    params_.push_back(NamedParam<T>{std::move(name), std::move(t)});
  }

  /// Fan-in scaled normal init: variance gain / fan_in, with gain 2 for convs
  /// feeding a relu.
  void add_conv(std::mt19937_64& rng, const std::string& prefix, int in, int out, int k,
                double gain = 2.0) {
    const double fan_in = static_cast<double>(in) * k * k;
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    const auto uk = static_cast<std::size_t>(k);
    Shape shape{static_cast<std::size_t>(out), static_cast<std::size_t>(in), uk, uk};
    std::vector<T> w(shape_numel(shape));
    for (auto& v : w) v = static_cast<T>(dist(rng));
    add_param(prefix + ".weight", Tensor<T>::from(shape, std::move(w), true));
    add_param(prefix + ".bias", Tensor<T>::zeros(Shape{static_cast<std::size_t>(out)}, true));
  }

  void add_norm(const std::string& prefix, int channels) {
    const Shape s{static_cast<std::size_t>(channels)};
    add_param(prefix + ".gamma", Tensor<T>::full(s, T(1), true));
    add_param(prefix + ".beta", Tensor<T>::zeros(s, true));
    add_param(prefix + ".running_mean", Tensor<T>::zeros(s));
    add_param(prefix + ".running_var", Tensor<T>::full(s, T(1)));
  }

  void add_block(std::mt19937_64& rng, const std::string& prefix, int in, int out) {
    add_conv(rng, prefix + ".conv1", in, out, 3);
    add_conv(rng, prefix + ".conv2", out, out, 3);
    if (config_.encoder.block_kind == BlockKind::Residual && in != out) {
      add_conv(rng, prefix + ".proj", in, out, 1);
    }
    if (config_.norm == NormKind::BatchNorm) {
      add_norm(prefix + ".bn1", out);
      add_norm(prefix + ".bn2", out);
    }
  }

  ModelConfig config_;
  std::vector<NamedParam<T>> params_;
  std::map<std::string, std::size_t> lookup_;
};

inline std::string encoder_block_name(std::size_t stage, int block) {
  return "encoder.stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto& widths = config_.encoder.stage_widths;
  const std::size_t S = widths.size();

  int in = config_.in_channels;
  for (std::size_t s = 0; s < S; ++s) {
    for (int b = 0; b < config_.encoder.blocks_per_stage; ++b) {
      add_block(rng, encoder_block_name(s, b), in, widths[s]);
      in = widths[s];
    }
  }

  int head_in = 0;
  if (config_.decoder == DecoderKind::UNet) {
    for (std::size_t s = S - 1; s-- > 0;) {
      const std::string prefix = "decoder.up" + std::to_string(s);
      const int cat = widths[s + 1] + widths[s];
      add_conv(rng, prefix + ".conv1", cat, widths[s], 3);
      add_conv(rng, prefix + ".conv2", widths[s], widths[s], 3);
      if (config_.norm == NormKind::BatchNorm) {
        add_norm(prefix + ".bn1", widths[s]);
        add_norm(prefix + ".bn2", widths[s]);
      }
    }
    head_in = widths[0];
  } else {
    const int f = config_.fpn_width;
    for (std::size_t s = 0; s < S; ++s) {
      add_conv(rng, "decoder.lateral" + std::to_string(s), widths[s], f, 1);
    }
    for (std::size_t s = 0; s < S; ++s) {
      add_conv(rng, "decoder.level" + std::to_string(s), f, f, 3);
    }
    add_conv(rng, "decoder.fuse", static_cast<int>(S) * f, f, 3);
    head_in = f;
  }
  add_conv(rng, "head", head_in, 1, 1, kHeadGain);
}

template <typename T>
Model<T> build_model(const ModelConfig& config) {
  return Model<T>(config);
}

/// Maps a B x C x H x W batch to B x 1 x H x W logits.
template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& batch, bool training = false) {
  const ModelConfig& cfg = model.config();
  if (batch.rank() != 4 || batch.dim(1) != static_cast<std::size_t>(cfg.in_channels) ||
      batch.dim(2) != static_cast<std::size_t>(cfg.height) ||
      batch.dim(3) != static_cast<std::size_t>(cfg.width)) {
    throw ShapeError("forward: batch shape " + shape_string(batch.shape()) + " does not match Bx" +
                     std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.height) + "x" +
                     std::to_string(cfg.width));
  }
  const std::size_t S = cfg.stages();
  const bool residual = cfg.encoder.block_kind == BlockKind::Residual;
  const bool bn = cfg.norm == NormKind::BatchNorm;

  std::vector<Tensor<T>> features;
  Tensor<T> x = batch;
  for (std::size_t s = 0; s < S; ++s) {
    if (s > 0) x = maxpool_2x2(x);
    for (int b = 0; b < cfg.encoder.blocks_per_stage; ++b) {
      const auto params = model.block(encoder_block_name(s, b));
      x = residual ? residual_block(x, params, training) : plain_block(x, params, training);
    }
    features.push_back(x);
  }

  auto norm_of = [&](const std::string& prefix) -> std::optional<NormParams<T>> {
    if (!bn) return std::nullopt;
    return model.norm(prefix);
  };

  if (cfg.decoder == DecoderKind::UNet) {
    for (std::size_t s = S - 1; s-- > 0;) {
      const std::string prefix = "decoder.up" + std::to_string(s);
      x = concat_channels(upsample_bilinear_2x(x), features[s]);
      x = relu(detail::conv_norm(x, model.conv(prefix + ".conv1"), norm_of(prefix + ".bn1"),
                                 training));
      x = relu(detail::conv_norm(x, model.conv(prefix + ".conv2"), norm_of(prefix + ".bn2"),
                                 training));
    }
  } else {
    // Top-down pathway: coarsest lateral, then upsample-and-add per level.
    std::vector<Tensor<T>> pyramid(S);
    for (std::size_t s = S; s-- > 0;) {
      const auto lat = model.conv("decoder.lateral" + std::to_string(s));
      Tensor<T> l = conv2d(features[s], lat.weight, lat.bias);
      pyramid[s] = s + 1 == S ? l : add(l, upsample_bilinear_2x(pyramid[s + 1]));
    }
    Tensor<T> merged;
    for (std::size_t s = 0; s < S; ++s) {
      const auto level = model.conv("decoder.level" + std::to_string(s));
      Tensor<T> h = relu(conv2d(pyramid[s], level.weight, level.bias, 1, 1));
      for (std::size_t k = 0; k < s; ++k) h = upsample_bilinear_2x(h);
      merged = s == 0 ? h : concat_channels(merged, h);
    }
    const auto fuse = model.conv("decoder.fuse");
    x = conv2d(merged, fuse.weight, fuse.bias, 1, 1);
  }
  const auto head = model.conv("head");
  return conv2d(x, head.weight, head.bias);
}

}  // namespace vesselseg
