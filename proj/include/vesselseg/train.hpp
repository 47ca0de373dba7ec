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
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "vesselseg/dataset.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/loss.hpp"
#include "vesselseg/metrics.hpp"
#include "vesselseg/nn.hpp"
#include "vesselseg/tensor.hpp"
#include "vesselseg/weights.hpp"

namespace vesselseg {

enum class OptimizerKind { SGD, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  int batch_size = 8;
  double learning_rate = 1e-4;
  int epochs = 100;
  std::uint64_t seed = 0;
  LossConfig loss;
  OptimizerConfig optimizer;
  double val_fraction = 0.2;
  /// Write ckpt_epochNNN.bin after every N-th epoch (and after the last).
  /// 0 writes only the final checkpoint.
  int checkpoint_every = 0;
  double threshold = 0.5;
  /// Where curves.csv and checkpoints go; empty disables file output.
  std::filesystem::path output_dir;
  /// Write measured seconds into curves.csv instead of 0. Off by default so
  /// that identical runs produce identical files.
  bool record_wall_time = false;
  /// Stop after the first epoch whose validation Dice reaches this value.
  /// 0 disables early stopping.
  double stop_at_val_dice = 0.0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    if (!(stop_at_val_dice >= 0.0 && stop_at_val_dice <= 1.0)) {
      throw ConfigError("train.stop_at_val_dice must lie in [0, 1]");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0, 1)");
    loss.validate();
  }
};

struct EpochReport {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_iou = 0.0;
  double val_dice = 0.0;
  double wall_time_s = 0.0;
};

/// SGD (heavy-ball momentum) or Adam over a fixed, ordered parameter list.
/// Parameters without a gradient this step are treated as having zero grad.
template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<NamedParam<T>> params, OptimizerConfig cfg, double lr)
      : params_(std::move(params)), cfg_(cfg), lr_(lr) {
    std::erase_if(params_, [](const NamedParam<T>& p) { return !p.tensor.requires_grad(); });
    for (const auto& p : params_) {
      first_.emplace_back(p.tensor.numel(), 0.0);
      if (cfg_.kind == OptimizerKind::Adam) second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  static Optimizer for_model(Model<T>& model, OptimizerConfig cfg, double lr) {
    return Optimizer({model.parameters().begin(), model.parameters().end()}, cfg, lr);
  }

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }
  std::uint64_t steps() const { return steps_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& t = params_[k].tensor;
      auto data = t.mutable_data();
      const auto grad = t.grad();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
        if (cfg_.kind == OptimizerKind::SGD) {
          double& vel = first_[k][i];
          vel = cfg_.momentum * vel + g;
          data[i] = static_cast<T>(static_cast<double>(data[i]) - lr_ * vel);
        } else {
          double& m = first_[k][i];
          double& v = second_[k][i];
          m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
          v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
          const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.epsilon);
          data[i] = static_cast<T>(static_cast<double>(data[i]) - lr_ * update);
        }
      }
    }
  }

  /// Optimizer state as weight-file records under the "optim/" prefix.
  std::vector<WeightRecord> state_records() const {
    std::vector<WeightRecord> out;
    out.push_back(WeightRecord::of("optim/step",
                                   Tensor<double>::from(Shape{1}, {static_cast<double>(steps_)})));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const Shape s{first_[k].size()};
      out.push_back(WeightRecord::of("optim/m/" + params_[k].name, Tensor<double>::from(s, first_[k])));
      if (!second_.empty()) {
        out.push_back(WeightRecord::of("optim/v/" + params_[k].name, Tensor<double>::from(s, second_[k])));
      }
    }
    return out;
  }

  void restore_state(std::span<const WeightRecord> records) {
    auto find = [&](const std::string& name) -> const WeightRecord& {
      for (const auto& r : records) {
        if (r.name == name) {
          if (r.dtype != DType::Float64) throw DataError("optimizer record '" + name + "' must be float64");
          return r;
        }
      }
      throw DataError("checkpoint is missing optimizer record '" + name + "'");
    };
    auto load = [&](const std::string& name, std::vector<double>& dst) {
      const auto& r = find(name);
      if (r.shape != Shape{dst.size()}) throw ShapeError("optimizer record '" + name + "': shape mismatch");
      std::memcpy(dst.data(), r.bytes.data(), r.bytes.size());
    };
    std::vector<double> step(1);
    load("optim/step", step);
    steps_ = static_cast<std::uint64_t>(step[0]);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      load("optim/m/" + params_[k].name, first_[k]);
      if (!second_.empty()) load("optim/v/" + params_[k].name, second_[k]);
    }
  }

 private:
  std::vector<NamedParam<T>> params_;
  OptimizerConfig cfg_;
  double lr_;
  std::uint64_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

template <typename T>
void save_checkpoint(const Model<T>& model, const Optimizer<T>& opt,
                     const std::filesystem::path& path) {
  auto records = model_records(model);
  auto state = opt.state_records();
  records.insert(records.end(), std::make_move_iterator(state.begin()),
                 std::make_move_iterator(state.end()));
  write_weight_file(path, records);
}

template <typename T>
void load_checkpoint(Model<T>& model, Optimizer<T>& opt, const std::filesystem::path& path) {
  const auto records = read_weight_file(path);
  assign_weights(model, records);
  opt.restore_state(records);
}

inline std::string checkpoint_name(int epoch) { return fmt::format("ckpt_epoch{:03d}.bin", epoch); }

inline constexpr std::string_view kCurvesHeader =
    "epoch,train_loss,val_loss,val_iou,val_dice,wall_time_s";

inline void write_curves_csv(const std::filesystem::path& path, std::span<const EpochReport> reports) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << kCurvesHeader << '\n';
  for (const auto& r : reports) {
    out << fmt::format("{},{:.8f},{:.8f},{:.6f},{:.6f},{:.3f}\n", r.epoch, r.train_loss, r.val_loss,
                       r.val_iou, r.val_dice, r.wall_time_s);
  }
}

struct LrRangeResult {
  std::vector<double> learning_rates;
  std::vector<double> losses;
  std::vector<double> smoothed;
  double suggested_lr = 0.0;
  bool stopped_early = false;
};

inline constexpr double kRangeTestSmoothing = 0.9;
inline constexpr double kRangeTestDivergence = 4.0;

/// Learning-rate range test over an explicit parameter list. `loss_at_step(i)`
/// must return a taped scalar loss for step i. The learning rate grows
/// geometrically from lr_min to lr_max; the bias-corrected EMA of the loss is
/// recorded and the sweep stops once it exceeds 4x its running minimum. The
/// suggestion is the interior point with the steepest negative slope of the
/// smoothed loss against log(lr). Parameters are restored afterwards.
template <typename T, typename LossAtStep>
LrRangeResult lr_range_test(std::span<const NamedParam<T>> params, LossAtStep&& loss_at_step,
                            OptimizerConfig opt_cfg, double lr_min, double lr_max, int steps) {
  if (!(lr_min > 0.0 && lr_min < lr_max)) throw ConfigError("lr_range_test: need 0 < lr_min < lr_max");
  if (steps < 10) throw ConfigError("lr_range_test: steps must be >= 10");

  std::vector<std::vector<T>> snapshot;
  for (const auto& p : params) snapshot.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

  Optimizer<T> opt(std::vector<NamedParam<T>>(params.begin(), params.end()), opt_cfg, lr_min);
  LrRangeResult res;
  const double ratio = std::log(lr_max / lr_min) / static_cast<double>(steps - 1);
  double avg = 0.0, best = 0.0;
  for (int i = 0; i < steps; ++i) {
    const double lr = lr_min * std::exp(ratio * i);
    active_tape<T>().clear();
    opt.zero_grad();
    double value;
    Tensor<T> loss;
    try {
      loss = loss_at_step(i);
      value = static_cast<double>(loss.item());
    } catch (const NumericError&) {
      value = std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(value)) {
      if (i == 0) throw NumericError("lr_range_test: loss is not finite at lr_min");
      res.stopped_early = true;
      break;
    }
    avg = kRangeTestSmoothing * avg + (1.0 - kRangeTestSmoothing) * value;
    const double smooth = avg / (1.0 - std::pow(kRangeTestSmoothing, i + 1));
    res.learning_rates.push_back(lr);
    res.losses.push_back(value);
    res.smoothed.push_back(smooth);
    best = i == 0 ? smooth : std::min(best, smooth);
    if (smooth > kRangeTestDivergence * best) {
      res.stopped_early = true;
      break;
    }
    backward(loss);
    opt.set_learning_rate(lr);
    opt.step();
  }
  active_tape<T>().clear();

  const auto& lrs = res.learning_rates;
  const auto& sm = res.smoothed;
  if (sm.size() >= 3) {
    double steepest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i + 1 < sm.size(); ++i) {
      const double slope = (sm[i + 1] - sm[i - 1]) / (std::log(lrs[i + 1]) - std::log(lrs[i - 1]));
      if (slope < steepest) {
        steepest = slope;
        res.suggested_lr = lrs[i];
      }
    }
  } else {
    res.suggested_lr = lrs[static_cast<std::size_t>(std::min_element(sm.begin(), sm.end()) - sm.begin())];
  }

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T> t = params[k].tensor;
    std::copy(snapshot[k].begin(), snapshot[k].end(), t.mutable_data().begin());
    t.zero_grad();
  }
  return res;
}

namespace detail {

inline std::vector<const Sample*> gather(std::span<const Sample> data,
                                         std::span<const std::size_t> order, std::size_t start,
                                         std::size_t count) {
  std::vector<const Sample*> out;
  for (std::size_t i = start; i < std::min(order.size(), start + count); ++i) {
    out.push_back(&data[order[i]]);
  }
  return out;
}

template <typename T>
std::vector<Mask> batch_masks(std::span<const Sample* const> batch) {
  std::vector<Mask> m;
  for (const Sample* s : batch) m.push_back(s->mask);
  return m;
}

}  // namespace detail

/// Range test on a model: step i trains on the i-th batch of `data` taken in
/// order (wrapping around). Model parameters, running statistics included,
/// are restored afterwards.
template <typename T>
LrRangeResult lr_range_test(Model<T>& model, std::span<const Sample> data, const TrainConfig& cfg,
                            double lr_min, double lr_max, int steps) {
  if (data.empty()) throw DataError("lr_range_test: no data");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t batches = (data.size() + bs - 1) / bs;
  auto loss_at = [&](int step) {
    const auto batch = detail::gather(data, order, (static_cast<std::size_t>(step) % batches) * bs, bs);
    const auto masks = detail::batch_masks<T>(batch);
    const Tensor<T> logits = forward(model, images_to_tensor<T>(batch), true);
    return compute_loss(cfg.loss, logits, masks_to_tensor<T>(masks));
  };
  // Running statistics are not trainable but must be restored too.
  std::vector<NamedParam<T>> all(model.parameters().begin(), model.parameters().end());
  std::vector<std::vector<T>> frozen;
  for (const auto& p : all) {
    if (!p.tensor.requires_grad()) frozen.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  auto result = lr_range_test<T>(std::span<const NamedParam<T>>(all), loss_at, cfg.optimizer,
                                 lr_min, lr_max, steps);
  std::size_t k = 0;
  for (auto& p : all) {
    if (!p.tensor.requires_grad()) {
      std::copy(frozen[k].begin(), frozen[k].end(), p.tensor.mutable_data().begin());
      ++k;
    }
  }
  return result;
}

struct TrainResult {
  std::vector<EpochReport> epochs;
};

/// Mini-batch training with a seeded per-epoch shuffle (last partial batch
/// kept), validation after every epoch, and optional curves/checkpoint
/// output. Identical inputs give a bitwise-identical loss trajectory.
template <typename T>
TrainResult train(Model<T>& model, std::span<const Sample> train_set,
                  std::span<const Sample> val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochReport&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: the Train split is empty");
  if (val_set.empty()) throw DataError("train: the Val split is empty");
  if (!cfg.output_dir.empty()) std::filesystem::create_directories(cfg.output_dir);

  Optimizer<T> opt = Optimizer<T>::for_model(model, cfg.optimizer, cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::size_t> val_order(val_set.size());
  for (std::size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index) {
      const auto batch = detail::gather(train_set, order, start, bs);
      const auto masks = detail::batch_masks<T>(batch);
      active_tape<T>().clear();
      opt.zero_grad();
      try {
        const Tensor<T> logits = forward(model, images_to_tensor<T>(batch), true);
        const Tensor<T> loss = compute_loss(cfg.loss, logits, masks_to_tensor<T>(masks));
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
        backward(loss);
        opt.step();
      } catch (const NumericError& e) {
        active_tape<T>().clear();
        throw NumericError(fmt::format("non-finite loss at epoch {} batch {}: {}", epoch,
                                       batch_index, e.what()));
      }
    }

    EpochReport rep;
    rep.epoch = epoch;
    rep.train_loss = loss_sum / static_cast<double>(train_set.size());
    {
      NoGradGuard no_grad;
      double val_loss = 0.0;
      std::vector<ImageScore> scores;
      try {
        for (std::size_t start = 0; start < val_set.size(); start += bs) {
          const auto batch = detail::gather(val_set, val_order, start, bs);
          const auto masks = detail::batch_masks<T>(batch);
          const Tensor<T> logits = forward(model, images_to_tensor<T>(batch), false);
          val_loss += static_cast<double>(compute_loss(cfg.loss, logits, masks_to_tensor<T>(masks)).item()) *
                      static_cast<double>(batch.size());
          auto s = score_logits(logits, batch, cfg.threshold);
          scores.insert(scores.end(), s.begin(), s.end());
        }
      } catch (const NumericError& e) {
        throw NumericError(fmt::format("non-finite validation output at epoch {}: {}", epoch, e.what()));
      }
      const auto summary = summarize(std::move(scores), cfg.threshold);
      rep.val_loss = val_loss / static_cast<double>(val_set.size());
      rep.val_iou = summary.mean_iou;
      rep.val_dice = summary.mean_dice;
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.wall_time_s = cfg.record_wall_time ? elapsed : 0.0;
    result.epochs.push_back(rep);
    if (on_epoch) {
      EpochReport live = rep;
      live.wall_time_s = elapsed;
      on_epoch(live);
    }

    const bool stop = cfg.stop_at_val_dice > 0.0 && rep.val_dice >= cfg.stop_at_val_dice;
    if (!cfg.output_dir.empty()) {
      write_curves_csv(cfg.output_dir / "curves.csv", result.epochs);
      const bool periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
      if (periodic || stop || epoch + 1 == cfg.epochs) {
        save_checkpoint(model, opt, cfg.output_dir / checkpoint_name(epoch));
      }
    }
    if (stop) break;
  }
  return result;
}

/// Splits by each sample's tag and trains.
template <typename T>
TrainResult train(Model<T>& model, std::span<const Sample> data, const TrainConfig& cfg,
                  const std::function<void(const EpochReport&)>& on_epoch = {}) {
  std::vector<Sample> tr, va;
  for (const auto& s : data) (s.split == Split::Train ? tr : va).push_back(s);
  return train(model, std::span<const Sample>(tr), std::span<const Sample>(va), cfg, on_epoch);
}

/// sigmoid(forward(img)) and its thresholded mask. `img` must already be
/// normalized and sized for the model.
template <typename T>
std::pair<Tensor<T>, Mask> predict(Model<T>& model, const ImageTensor& img, double t = 0.5) {
  NoGradGuard no_grad;
  const Tensor<T> logits = forward(model, image_to_tensor<T>(img), false);
  const Tensor<T> probs = sigmoid(logits);
  // Saturated logits would round to exactly 0 or 1; keep the open interval.
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  std::vector<T> values(probs.data().begin(), probs.data().end());
  for (auto& v : values) v = std::clamp(v, lo, hi);
  Tensor<T> prob_map = Tensor<T>::from(Shape{1, logits.dim(2), logits.dim(3)}, std::move(values));
  Mask mask = threshold(prob_map, t);
  return {prob_map, mask};
}

}  // namespace vesselseg
