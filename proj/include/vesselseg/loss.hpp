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
#include <span>
#include <string>
#include <vector>

#include "vesselseg/error.hpp"
#include "vesselseg/raster.hpp"
#include "vesselseg/tensor.hpp"

namespace vesselseg {

enum class LossKind { Dice, WeightedCE, Focal, BCE };

struct LossConfig {
  LossKind kind = LossKind::Dice;
  double beta = 0.9;
  double gamma = 2.0;
  double alpha = 0.5;
  double epsilon_smooth = 1.0;
  /// Average per-image Dice losses instead of one batch-global ratio.
  bool per_image = false;

  void validate() const {
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("loss.beta must lie in (0, 1)");
    if (!(gamma >= 0.0)) throw ConfigError("loss.gamma must be >= 0");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("loss.alpha must lie in (0, 1)");
    if (!(epsilon_smooth > 0.0)) throw ConfigError("loss.epsilon_smooth must be > 0");
  }
};

/// Stacks N masks of equal size into an N x 1 x H x W tensor of 0/1 values.
template <typename T>
Tensor<T> masks_to_tensor(std::span<const Mask> masks) {
  if (masks.empty()) throw ShapeError("masks_to_tensor: empty batch");
  const auto H = static_cast<std::size_t>(masks[0].height());
  const auto W = static_cast<std::size_t>(masks[0].width());
  std::vector<T> data;
  data.reserve(masks.size() * H * W);
  for (const auto& m : masks) {
    if (static_cast<std::size_t>(m.height()) != H || static_cast<std::size_t>(m.width()) != W) {
      throw ShapeError("masks_to_tensor: masks differ in size");
    }
    for (auto b : m.bits()) data.push_back(static_cast<T>(b));
  }
  return Tensor<T>::from(Shape{masks.size(), 1, H, W}, std::move(data));
}

namespace detail {

/// log(1 + exp(v)) without overflow.
template <typename T>
T softplus(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
void check_loss_shapes(const char* op, const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.rank() != 4 || logits.dim(1) != 1) {
    shape_fail(op, "logits must be Bx1xHxW, got " + shape_string(logits.shape()));
  }
  if (logits.shape() != target.shape()) {
    shape_fail(op, "logits " + shape_string(logits.shape()) + " vs target " +
                       shape_string(target.shape()));
  }
}

/// Mean of a per-pixel loss whose derivative w.r.t. the logit is supplied
/// alongside. `pixel` returns {loss, dloss/dlogit}.
template <typename T, typename PixelFn>
Tensor<T> mean_pixel_loss(OpKind kind, const Tensor<T>& logits, const Tensor<T>& target,
                          PixelFn pixel) {
  const std::size_t n = logits.numel();
  std::vector<T> dlogit(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [l, d] = pixel(logits.data()[i], target.data()[i]);
    total += static_cast<double>(l);
    dlogit[i] = d / static_cast<T>(n);
  }
  return record<T>(kind, Shape{}, {static_cast<T>(total / static_cast<double>(n))},
                   {&logits, &target},
                   [dlogit = std::move(dlogit)](Node<T>* y, const NodeList<T>& in) mutable {
                     return [dlogit = std::move(dlogit), y, ln = in[0].get()]() {
                       auto d = ln->grad_sink();
                       for (std::size_t i = 0; i < d.size(); ++i) d[i] += y->grad[0] * dlogit[i];
                     };
                   });
}

}  // namespace detail

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps) with p = sigmoid(logits).
/// Sums run over the whole batch unless `per_image`, in which case the
/// per-image losses are averaged.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& target, double epsilon_smooth = 1.0,
                    bool per_image = false) {
  detail::check_loss_shapes("dice_loss", logits, target);
  const std::size_t B = logits.dim(0);
  const std::size_t n = logits.numel();
  const std::size_t groups = per_image ? B : 1;
  const std::size_t per = n / groups;
  const double eps = epsilon_smooth;

  std::vector<T> dlogit(n);
  double loss = 0.0;
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double inter = 0.0, total = 0.0;
    std::vector<double> p(per);
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t k = gi * per + i;
      p[i] = stable_sigmoid(static_cast<double>(logits.data()[k]));
      const double g = static_cast<double>(target.data()[k]);
      inter += p[i] * g;
      total += p[i] + g;
    }
    const double num = 2.0 * inter + eps;
    const double den = total + eps;
    loss += 1.0 - num / den;
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t k = gi * per + i;
      const double g = static_cast<double>(target.data()[k]);
      const double dp = -(2.0 * g * den - num) / (den * den);
      dlogit[k] = static_cast<T>(dp * p[i] * (1.0 - p[i]) / static_cast<double>(groups));
    }
  }
  loss /= static_cast<double>(groups);
  return detail::record<T>(
      OpKind::DiceLoss, Shape{}, {static_cast<T>(loss)}, {&logits, &target},
      [dlogit = std::move(dlogit)](detail::Node<T>* y, const detail::NodeList<T>& in) mutable {
        return [dlogit = std::move(dlogit), y, ln = in[0].get()]() {
          auto d = ln->grad_sink();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += y->grad[0] * dlogit[i];
        };
      });
}

/// Mean of -beta g log(p) - (1 - beta)(1 - g) log(1 - p), p = sigmoid(logit),
/// evaluated as beta g softplus(-l) + (1 - beta)(1 - g) softplus(l).
template <typename T>
Tensor<T> weighted_ce(const Tensor<T>& logits, const Tensor<T>& target, double beta = 0.9) {
  detail::check_loss_shapes("weighted_ce", logits, target);
  const T b = static_cast<T>(beta);
  return detail::mean_pixel_loss<T>(
      OpKind::WeightedCrossEntropy, logits, target, [b](T l, T g) {
        const T s = stable_sigmoid(l);
        const T loss = b * g * detail::softplus(-l) + (T(1) - b) * (T(1) - g) * detail::softplus(l);
        const T d = b * g * (s - T(1)) + (T(1) - b) * (T(1) - g) * s;
        return std::pair{loss, d};
      });
}

/// Unweighted binary cross-entropy on logits.
template <typename T>
Tensor<T> bce(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::check_loss_shapes("bce", logits, target);
  return detail::mean_pixel_loss<T>(
      OpKind::BinaryCrossEntropy, logits, target, [](T l, T g) {
        const T s = stable_sigmoid(l);
        const T loss = g * detail::softplus(-l) + (T(1) - g) * detail::softplus(l);
        return std::pair{loss, s - g};
      });
}

/// Mean of -alpha_t (1 - p_t)^gamma log(p_t) for binary targets, where p_t is
/// the probability assigned to the true class.
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const Tensor<T>& target, double gamma = 2.0,
                     double alpha = 0.5) {
  detail::check_loss_shapes("focal_loss", logits, target);
  const T gm = static_cast<T>(gamma);
  const T a = static_cast<T>(alpha);
  return detail::mean_pixel_loss<T>(
      OpKind::FocalLoss, logits, target, [gm, a](T l, T g) {
        // z is the logit of the true class; q = 1 - p_t = sigmoid(-z).
        const bool positive = g > T(0.5);
        const T z = positive ? l : -l;
        const T at = positive ? a : T(1) - a;
        const T q = stable_sigmoid(-z);
        const T sp = detail::softplus(-z);  // -log(p_t)
        const T qg = gm == T(0) ? T(1) : std::pow(q, gm);
        const T loss = at * qg * sp;
        const T dz = -at * qg * (gm * (T(1) - q) * sp + q);
        return std::pair{loss, positive ? dz : -dz};
      });
}

template <typename T>
Tensor<T> compute_loss(const LossConfig& cfg, const Tensor<T>& logits, const Tensor<T>& target) {
  switch (cfg.kind) {
    case LossKind::Dice: return dice_loss(logits, target, cfg.epsilon_smooth, cfg.per_image);
    case LossKind::WeightedCE: return weighted_ce(logits, target, cfg.beta);
    case LossKind::Focal: return focal_loss(logits, target, cfg.gamma, cfg.alpha);
    case LossKind::BCE: return bce(logits, target);
  }
  throw ConfigError("unknown loss kind");
}

}  // namespace vesselseg
