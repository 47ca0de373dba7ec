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
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "vesselseg/detail/interp.hpp"
#include "vesselseg/error.hpp"

namespace vesselseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

enum class OpKind {
  Conv2d,
  UpsampleBilinear2x,
  MaxPool2x2,
  Relu,
  Sigmoid,
  Add,
  Mul,
  Sum,
  ConcatChannels,
  BatchNorm,
  DiceLoss,
  WeightedCrossEntropy,
  FocalLoss,
  BinaryCrossEntropy,
};

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::Conv2d: return "conv2d";
    case OpKind::UpsampleBilinear2x: return "upsample_bilinear_2x";
    case OpKind::MaxPool2x2: return "maxpool_2x2";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Sum: return "sum";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::DiceLoss: return "dice_loss";
    case OpKind::WeightedCrossEntropy: return "weighted_ce";
    case OpKind::FocalLoss: return "focal_loss";
    case OpKind::BinaryCrossEntropy: return "bce";
  }
  return "?";
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  /// Gradient buffer for accumulation, allocated on first use; empty span when
  /// this node does not take gradients.
  std::span<T> grad_sink() {
    if (!requires_grad) return {};
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

/// Dense row-major array. Copies share storage; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), std::vector<T>(), requires_grad, true);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
    return Tensor(std::move(shape), std::move(data), requires_grad, false);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from(Shape{}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// In-place access for parameter updates and weight loading only.
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    Tensor t = from(node_->shape, node_->data, node_->requires_grad);
    t.node_->grad = node_->grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  Tensor(Shape shape, std::vector<T> data, bool requires_grad, bool fill_zero)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->shape = std::move(shape);
    node_->data = fill_zero ? std::vector<T>(shape_numel(node_->shape), T(0)) : std::move(data);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
struct TapeEntry {
  OpKind kind;
  std::vector<std::shared_ptr<detail::Node<T>>> inputs;
  std::shared_ptr<detail::Node<T>> output;
  /// Reads output->grad and accumulates into each input's grad_sink().
  std::function<void()> backward;
};

/// Ordered record of differentiable operations, in execution (topological)
/// order. One tape per thread and scalar type; backward() clears it.
template <typename T>
class Tape {
 public:
  void record(TapeEntry<T> entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }
  const std::vector<TapeEntry<T>>& entries() const { return entries_; }

 private:
  std::vector<TapeEntry<T>> entries_;
};

template <typename T>
Tape<T>& active_tape() {
  thread_local Tape<T> tape;
  return tape;
}

namespace detail {

template <typename T>
void require_finite(OpKind kind, std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(to_string(kind)) + " produced a non-finite value");
    }
  }
}

/// Wraps freshly computed output data into a Tensor and, when any input takes
/// gradients and recording is enabled, appends a tape entry. `make_backward`
/// receives (output node, input nodes) and returns the backward closure.
template <typename T, typename MakeBackward>
Tensor<T> record(OpKind kind, Shape shape, std::vector<T> data,
                 std::initializer_list<const Tensor<T>*> inputs, MakeBackward&& make_backward) {
  require_finite<T>(kind, data);
  bool needs_grad = false;
  if (grad_mode_flag()) {
    for (const auto* in : inputs) needs_grad = needs_grad || in->requires_grad();
  }
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data), needs_grad);
  if (needs_grad) {
    TapeEntry<T> entry;
    entry.kind = kind;
    for (const auto* in : inputs) entry.inputs.push_back(in->node());
    entry.output = out.node();
    entry.backward = make_backward(out.node().get(), entry.inputs);
    active_tape<T>().record(std::move(entry));
  }
  return out;
}

template <typename T>
using NodeList = std::vector<std::shared_ptr<Node<T>>>;

[[noreturn]] inline void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void require_rank4(const char* op, const Tensor<T>& x, const char* name = "input") {
  if (x.rank() != 4) {
    shape_fail(op, std::string(name) + " must be NxCxHxW, got " + shape_string(x.shape()));
  }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

/// Unfolds one sample (C x H x W) into a (C*K*K) x (Ho*Wo) patch matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                          ? T(0)
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters patch-matrix gradients back onto the sample.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = dx + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) {
              dst[static_cast<std::size_t>(ix)] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution (cross-correlation) with zero padding.
/// x: N x C x H x W, weight: O x C x K x K, bias: O.
/// Output spatial size is floor((in + 2 * pad - K) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0) {
  constexpr const char* op = "conv2d";
  detail::require_rank4(op, x);
  detail::require_rank4(op, weight, "weight");
  if (stride == 0) detail::shape_fail(op, "stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != C) {
    detail::shape_fail(op, "weight in-channels " + std::to_string(weight.dim(1)) +
                               " != input channels " + std::to_string(C));
  }
  if (weight.dim(3) != K) detail::shape_fail(op, "kernel must be square, got " + shape_string(weight.shape()));
  if (bias.rank() != 1 || bias.dim(0) != O) {
    detail::shape_fail(op, "bias shape " + shape_string(bias.shape()) + " != [" +
                               std::to_string(O) + "]");
  }
  if (H + 2 * pad < K || W + 2 * pad < K) {
    detail::shape_fail(op, "kernel " + std::to_string(K) + " larger than padded input " +
                               std::to_string(H + 2 * pad) + "x" + std::to_string(W + 2 * pad));
  }
  const detail::ConvGeometry g{C, H, W, K, stride, pad, (H + 2 * pad - K) / stride + 1,
                               (W + 2 * pad - K) / stride + 1};
  const std::size_t P = g.positions(), CKK = g.patch();

  std::vector<T> out(N * O * P);
  std::vector<T> col(g.is_pointwise() ? 0 : CKK * P);
  detail::ConstMatMap<T> wmat(weight.data().data(), static_cast<Eigen::Index>(O),
                              static_cast<Eigen::Index>(CKK));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bvec(bias.data().data(),
                                                              static_cast<Eigen::Index>(O));
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data().data() + n * C * H * W;
    const T* cols = xn;
    if (!g.is_pointwise()) {
      detail::im2col(xn, g, col.data());
      cols = col.data();
    }
    detail::ConstMatMap<T> cmat(cols, static_cast<Eigen::Index>(CKK), static_cast<Eigen::Index>(P));
    detail::MatMap<T> omat(out.data() + n * O * P, static_cast<Eigen::Index>(O),
                           static_cast<Eigen::Index>(P));
    omat.noalias() = wmat * cmat;
    omat.colwise() += bvec;
  }

  return detail::record<T>(
      OpKind::Conv2d, Shape{N, O, g.out_h, g.out_w}, std::move(out), {&x, &weight, &bias},
      [g, N, O](detail::Node<T>* y, const detail::NodeList<T>& in) {
        return [g, N, O, y, xn = in[0].get(), wn = in[1].get(), bn = in[2].get()]() {
          const std::size_t P = g.positions(), CKK = g.patch();
          const std::size_t sample = g.channels * g.height * g.width;
          auto dx = xn->grad_sink();
          auto dw = wn->grad_sink();
          auto db = bn->grad_sink();
          std::vector<T> col(g.is_pointwise() ? 0 : CKK * P);
          detail::ConstMatMap<T> wmat(wn->data.data(), static_cast<Eigen::Index>(O),
                                      static_cast<Eigen::Index>(CKK));
          for (std::size_t n = 0; n < N; ++n) {
            detail::ConstMatMap<T> gout(y->grad.data() + n * O * P, static_cast<Eigen::Index>(O),
                                        static_cast<Eigen::Index>(P));
            if (!db.empty()) {
              // Fixed summation order; Eigen's vectorized reductions depend on alignment.
              const T* go = y->grad.data() + n * O * P;
              for (std::size_t o = 0; o < O; ++o) {
                T acc = 0;
                for (std::size_t p = 0; p < P; ++p) acc += go[o * P + p];
                db[o] += acc;
              }
            }
            if (!dw.empty()) {
              const T* cols = xn->data.data() + n * sample;
              if (!g.is_pointwise()) {
                detail::im2col(cols, g, col.data());
                cols = col.data();
              }
              detail::ConstMatMap<T> cmat(cols, static_cast<Eigen::Index>(CKK),
                                          static_cast<Eigen::Index>(P));
              detail::MatMap<T> dwm(dw.data(), static_cast<Eigen::Index>(O),
                                    static_cast<Eigen::Index>(CKK));
              dwm.noalias() += gout * cmat.transpose();
            }
            if (!dx.empty()) {
              if (g.is_pointwise()) {
                detail::MatMap<T> dxm(dx.data() + n * sample, static_cast<Eigen::Index>(CKK),
                                      static_cast<Eigen::Index>(P));
                dxm.noalias() += wmat.transpose() * gout;
              } else {
                detail::MatMap<T> dcol(col.data(), static_cast<Eigen::Index>(CKK),
                                       static_cast<Eigen::Index>(P));
                dcol.noalias() = wmat.transpose() * gout;
                detail::col2im_add(col.data(), g, dx.data() + n * sample);
              }
            }
          }
        };
      });
}

/// Doubles H and W by bilinear interpolation (half-pixel centers, clamped).
template <typename T>
Tensor<T> upsample_bilinear_2x(const Tensor<T>& x) {
  detail::require_rank4("upsample_bilinear_2x", x);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  auto ty = detail::linear_taps(static_cast<int>(H), static_cast<int>(Ho));
  auto tx = detail::linear_taps(static_cast<int>(W), static_cast<int>(Wo));
  std::vector<T> out(N * C * Ho * Wo);
  const T* src = x.data().data();
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* plane = src + p * H * W;
    T* dst = out.data() + p * Ho * Wo;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      const auto& vy = ty[oy];
      const T wy = static_cast<T>(vy.w_hi);
      const T* r0 = plane + static_cast<std::size_t>(vy.lo) * W;
      const T* r1 = plane + static_cast<std::size_t>(vy.hi) * W;
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const auto& vx = tx[ox];
        const T wx = static_cast<T>(vx.w_hi);
        const T top = (T(1) - wx) * r0[vx.lo] + wx * r0[vx.hi];
        const T bottom = (T(1) - wx) * r1[vx.lo] + wx * r1[vx.hi];
        dst[oy * Wo + ox] = (T(1) - wy) * top + wy * bottom;
      }
    }
  }
  return detail::record<T>(
      OpKind::UpsampleBilinear2x, Shape{N, C, Ho, Wo}, std::move(out), {&x},
      [=](detail::Node<T>* y, const detail::NodeList<T>& in) {
        return [=, xn = in[0].get()]() {
          auto dx = xn->grad_sink();
          if (dx.empty()) return;
          for (std::size_t p = 0; p < N * C; ++p) {
            T* plane = dx.data() + p * H * W;
            const T* g = y->grad.data() + p * Ho * Wo;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const auto& vy = ty[oy];
              const T wy = static_cast<T>(vy.w_hi);
              T* r0 = plane + static_cast<std::size_t>(vy.lo) * W;
              T* r1 = plane + static_cast<std::size_t>(vy.hi) * W;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const auto& vx = tx[ox];
                const T wx = static_cast<T>(vx.w_hi);
                const T go = g[oy * Wo + ox];
                r0[vx.lo] += (T(1) - wy) * (T(1) - wx) * go;
                r0[vx.hi] += (T(1) - wy) * wx * go;
                r1[vx.lo] += wy * (T(1) - wx) * go;
                r1[vx.hi] += wy * wx * go;
              }
            }
          }
        };
      });
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximum in row-major order.
template <typename T>
Tensor<T> maxpool_2x2(const Tensor<T>& x) {
  constexpr const char* op = "maxpool_2x2";
  detail::require_rank4(op, x);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) {
    detail::shape_fail(op, "spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                               " must be even");
  }
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(N * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  const T* src = x.data().data();
  for (std::size_t p = 0; p < N * C; ++p) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = p * H * W + (2 * oy) * W + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t c : cand) {
          if (src[c] > src[best]) best = c;
        }
        const std::size_t o = (p * Ho + oy) * Wo + ox;
        out[o] = src[best];
        argmax[o] = best;
      }
    }
  }
  return detail::record<T>(
      OpKind::MaxPool2x2, Shape{N, C, Ho, Wo}, std::move(out), {&x},
      [argmax = std::move(argmax)](detail::Node<T>* y, const detail::NodeList<T>& in) mutable {
        return [argmax = std::move(argmax), y, xn = in[0].get()]() {
          auto dx = xn->grad_sink();
          if (dx.empty()) return;
          for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += y->grad[o];
        };
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::record<T>(OpKind::Relu, x.shape(), std::move(out), {&x},
                           [](detail::Node<T>* y, const detail::NodeList<T>& in) {
                             return [y, xn = in[0].get()]() {
                               auto dx = xn->grad_sink();
                               if (dx.empty()) return;
                               for (std::size_t i = 0; i < dx.size(); ++i) {
                                 if (xn->data[i] > T(0)) dx[i] += y->grad[i];
                               }
                             };
                           });
}

/// Logistic function, evaluated without overflow for large |x|.
template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = stable_sigmoid(v);
  return detail::record<T>(OpKind::Sigmoid, x.shape(), std::move(out), {&x},
                           [](detail::Node<T>* y, const detail::NodeList<T>& in) {
                             return [y, xn = in[0].get()]() {
                               auto dx = xn->grad_sink();
                               if (dx.empty()) return;
                               for (std::size_t i = 0; i < dx.size(); ++i) {
                                 const T s = y->data[i];
                                 dx[i] += y->grad[i] * s * (T(1) - s);
                               }
                             };
                           });
}

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "operand shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()) + " differ (no broadcasting)");
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::record<T>(OpKind::Add, a.shape(), std::move(out), {&a, &b},
                           [](detail::Node<T>* y, const detail::NodeList<T>& in) {
                             return [y, an = in[0].get(), bn = in[1].get()]() {
                               // Same node on both sides accumulates twice.
                               for (auto* n : {an, bn}) {
                                 auto d = n->grad_sink();
                                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += y->grad[i];
                               }
                             };
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::record<T>(OpKind::Mul, a.shape(), std::move(out), {&a, &b},
                           [](detail::Node<T>* y, const detail::NodeList<T>& in) {
                             return [y, an = in[0].get(), bn = in[1].get()]() {
                               auto da = an->grad_sink();
                               for (std::size_t i = 0; i < da.size(); ++i) {
                                 da[i] += y->grad[i] * bn->data[i];
                               }
                               auto db = bn->grad_sink();
                               for (std::size_t i = 0; i < db.size(); ++i) {
                                 db[i] += y->grad[i] * an->data[i];
                               }
                             };
                           });
}

/// Sum of all elements as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return detail::record<T>(OpKind::Sum, Shape{}, {total}, {&x},
                           [](detail::Node<T>* y, const detail::NodeList<T>& in) {
                             return [y, xn = in[0].get()]() {
                               auto dx = xn->grad_sink();
                               for (auto& d : dx) d += y->grad[0];
                             };
                           });
}

/// Concatenates NCHW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr const char* op = "concat_channels";
  detail::require_rank4(op, a, "first operand");
  detail::require_rank4(op, b, "second operand");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    detail::shape_fail(op, "batch/spatial dims of " + shape_string(a.shape()) + " and " +
                               shape_string(b.shape()) + " differ");
  }
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  std::vector<T> out(N * (Ca + Cb) * HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.data().data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.data().data() + n * Cb * HW, Cb * HW, out.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return detail::record<T>(
      OpKind::ConcatChannels, Shape{N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), {&a, &b},
      [=](detail::Node<T>* y, const detail::NodeList<T>& in) {
        return [=, an = in[0].get(), bn = in[1].get()]() {
          auto da = an->grad_sink();
          auto db = bn->grad_sink();
          for (std::size_t n = 0; n < N; ++n) {
            const T* g = y->grad.data() + n * (Ca + Cb) * HW;
            for (std::size_t i = 0; !da.empty() && i < Ca * HW; ++i) da[n * Ca * HW + i] += g[i];
            for (std::size_t i = 0; !db.empty() && i < Cb * HW; ++i) {
              db[n * Cb * HW + i] += g[Ca * HW + i];
            }
          }
        };
      });
}

struct BatchNormOptions {
  bool training = true;
  double epsilon = 1e-5;
  double momentum = 0.1;
};

/// Per-channel batch normalization over (N, H, W). In training mode the
/// batch statistics are used and the running statistics are updated in place;
/// in evaluation mode the running statistics are used.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var,
                    const BatchNormOptions& opt = {}) {
  constexpr const char* op = "batchnorm";
  detail::require_rank4(op, x);
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->rank() != 1 || p->dim(0) != C) {
      detail::shape_fail(op, "per-channel parameter shape " + shape_string(p->shape()) +
                                 " != [" + std::to_string(C) + "]");
    }
  }
  const T eps = static_cast<T>(opt.epsilon);
  const std::size_t count = N * HW;
  std::vector<T> mean(C), inv_std(C);
  if (opt.training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    const T mom = static_cast<T>(opt.momentum);
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data().data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data().data() + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= static_cast<T>(count);
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
      rm[c] = (T(1) - mom) * rm[c] + mom * m;
      rv[c] = (T(1) - mom) * rv[c] + mom * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }
  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[base + i] = (x.data()[base + i] - mean[c]) * inv_std[c];
        out[base + i] = gamma.data()[c] * xhat[base + i] + beta.data()[c];
      }
    }
  }
  const bool training = opt.training;
  return detail::record<T>(
      OpKind::BatchNorm, x.shape(), std::move(out), {&x, &gamma, &beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          detail::Node<T>* y, const detail::NodeList<T>& in) mutable {
        return [=, xhat = std::move(xhat), inv_std = std::move(inv_std), xn = in[0].get(),
                gn = in[1].get(), bn = in[2].get()]() {
          auto dx = xn->grad_sink();
          auto dg = gn->grad_sink();
          auto db = bn->grad_sink();
          for (std::size_t c = 0; c < C; ++c) {
            T sum_dy = 0, sum_dy_xhat = 0;
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) {
                sum_dy += y->grad[base + i];
                sum_dy_xhat += y->grad[base + i] * xhat[base + i];
              }
            }
            if (!dg.empty()) dg[c] += sum_dy_xhat;
            if (!db.empty()) db[c] += sum_dy;
            if (dx.empty()) continue;
            const T g = gn->data[c];
            const T k = g * inv_std[c];
            const T inv_count = T(1) / static_cast<T>(count);
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) {
                if (training) {
                  dx[base + i] += k * (y->grad[base + i] - sum_dy * inv_count -
                                       xhat[base + i] * sum_dy_xhat * inv_count);
                } else {
                  dx[base + i] += k * y->grad[base + i];
                }
              }
            }
          }
        };
      });
}

/// Attributes consumed by apply(); fields irrelevant to an OpKind are ignored.
struct OpAttrs {
  std::size_t stride = 1;
  std::size_t pad = 0;
  BatchNormOptions batchnorm{};
};

/// Uniform dispatch over the layer operations. Input arity per kind:
/// conv2d (x, weight, bias); add/concat_channels/mul (a, b);
/// batchnorm (x, gamma, beta, running_mean, running_var); others (x).
template <typename T>
Tensor<T> apply(OpKind kind, std::span<Tensor<T>> inputs, const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(to_string(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::Conv2d: need(3); return conv2d(inputs[0], inputs[1], inputs[2], attrs.stride, attrs.pad);
    case OpKind::UpsampleBilinear2x: need(1); return upsample_bilinear_2x(inputs[0]);
    case OpKind::MaxPool2x2: need(1); return maxpool_2x2(inputs[0]);
    case OpKind::Relu: need(1); return relu(inputs[0]);
    case OpKind::Sigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::Add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::Mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::Sum: need(1); return sum(inputs[0]);
    case OpKind::ConcatChannels: need(2); return concat_channels(inputs[0], inputs[1]);
    case OpKind::BatchNorm:
      need(5);
      return batchnorm(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], attrs.batchnorm);
    default:
      throw Error(std::string(to_string(kind)) + " is a loss; call it through the loss API");
  }
}

/// Reverse-mode sweep from a scalar produced by taped operations. Populates
/// grad on every node that requires gradients, accumulating across fan-out,
/// then clears the active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  auto& tape = active_tape<T>();
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  if (tape.empty()) throw Error("backward: tape is empty");
  const auto& entries = tape.entries();
  auto it = std::find_if(entries.rbegin(), entries.rend(),
                         [&](const TapeEntry<T>& e) { return e.output == loss.node(); });
  if (it == entries.rend()) {
    tape.clear();
    throw Error("backward: loss was not produced by a taped operation");
  }
  loss.node()->grad.assign(1, T(1));
  for (; it != entries.rend(); ++it) {
    if (!it->output->grad.empty()) it->backward();
  }
  tape.clear();
}

/// Compares reverse-mode gradients of `f` at `x` with central differences
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). Returns the largest relative
/// error, using max(|analytic|, |numeric|, 1e-8) as denominator.
template <typename T, typename F>
double grad_check(F&& f, Tensor<T> x, double eps) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be > 0");
  active_tape<T>().clear();
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> y = f(x);
  if (!std::isfinite(static_cast<double>(y.item()))) throw NumericError("grad_check: f(x) is not finite");
  backward(y);
  std::vector<T> analytic(x.numel(), T(0));
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  double worst = 0.0;
  NoGradGuard no_grad;
  auto values = x.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = static_cast<T>(saved + eps);
    const double up = static_cast<double>(f(x).item());
    values[i] = static_cast<T>(saved - eps);
    const double down = static_cast<double>(f(x).item());
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  x.set_requires_grad(had_grad);
  return worst;
}

}  // namespace vesselseg
