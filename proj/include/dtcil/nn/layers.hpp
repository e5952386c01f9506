// SPDX-License-Identifier: Apache-2.0
//
// Layer primitives with explicit forward/backward passes. Each layer caches
// what it needs from its last forward call, so a layer instance must see
// forward and backward in strict alternation.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "dtcil/tensor.hpp"

namespace dtcil::nn {

using Rng = std::mt19937_64;

/// Batch-normalization behaviour for one forward call.
enum class Mode {
  Train,       // batch statistics, running statistics updated
  Eval,        // running statistics
  BatchStats,  // batch statistics, running statistics left untouched
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  /// Leading elements that are never updated (frozen rows of a weight matrix).
  std::size_t frozen_prefix = 0;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.zero(); }
};

using ParamList = std::vector<Param*>;

enum class Padding { Zeros, Reflect };

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Padding mode, bool bias, const std::string& name);

  void init(Rng& rng);
  Tensor forward(const Tensor& x);
  /// Accumulates parameter gradients unless frozen; returns dL/dx when `need_dx`.
  Tensor backward(const Tensor& dy, bool need_dx = true);
  void params(ParamList& out);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  bool frozen = false;

  Param weight;  // [out, in, k, k]
  Param bias;    // [out] or empty

 private:
  void im2col(const float* x, int h, int w, float* col) const;
  void col2im(const float* col, int h, int w, float* dx) const;

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Padding mode_ = Padding::Zeros;
  bool has_bias_ = false;
  Tensor x_;
  int ho_ = 0, wo_ = 0;
};

/// Per-channel batch normalization over (N, H, W).
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(int channels, bool affine, const std::string& name, float eps = 1e-5f, float momentum = 0.1f);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void params(ParamList& out);
  /// Running statistics (non-trainable, serialized with checkpoints).
  void buffers(std::vector<Tensor*>& out) {
    out.push_back(&running_mean);
    out.push_back(&running_var);
  }

  /// Input seen by the last forward call.
  const Tensor& last_input() const { return x_; }
  /// Extra gradient w.r.t. the layer input, added during the next backward call and then cleared.
  void inject_input_grad(Tensor g) { injected_ = std::move(g); }

  int channels() const { return c_; }
  bool affine() const { return affine_; }
  float eps() const { return eps_; }
  bool frozen = false;

  Param gamma, beta;
  Tensor running_mean, running_var;

  /// Normalized activations of the last forward call (needed by conditional BN).
  const Tensor& normalized() const { return xhat_; }
  /// Backward from d(xhat) (used when the affine part lives elsewhere).
  Tensor backward_from_normalized(const Tensor& dxhat);

 private:
  int c_ = 0;
  bool affine_ = true;
  float eps_ = 1e-5f, momentum_ = 0.1f;
  Mode mode_ = Mode::Train;
  Tensor x_, xhat_;
  std::vector<float> inv_std_;
  Tensor injected_;
};

/// Batch norm without built-in affine, followed by label-indexed per-channel scale and bias.
/// A one-hot label through a bias-free fully connected layer selects one row of each table.
class ConditionalBatchNorm2d {
 public:
  ConditionalBatchNorm2d() = default;
  ConditionalBatchNorm2d(int channels, int num_classes, const std::string& name);

  Tensor forward(const Tensor& x, const std::vector<int>& labels, Mode mode);
  Tensor backward(const Tensor& dy);
  void params(ParamList& out);
  void buffers(std::vector<Tensor*>& out) { bn.buffers(out); }

  BatchNorm2d bn;
  Param gamma;  // [classes, C]
  Param beta;   // [classes, C]

 private:
  std::vector<int> labels_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor x_;
};

class LeakyReLU {
 public:
  explicit LeakyReLU(float slope = 0.2f) : slope_(slope) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  float slope_;
  Tensor x_;
};

class Tanh {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor y_;
};

// Stateless helpers.
Tensor upsample_bilinear2x(const Tensor& x);
Tensor upsample_bilinear2x_backward(const Tensor& dy, const Shape& in_shape);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]
Tensor global_avg_pool_backward(const Tensor& dy, const Shape& in_shape);
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& d, int ca, Tensor& da, Tensor& db);

/// Fills `t` with N(0, std^2).
void fill_normal(Tensor& t, float stddev, Rng& rng);

double grad_norm(const ParamList& params);
/// Scales gradients so the global norm is at most `max_norm`; returns the pre-clip norm.
double clip_grad_norm(const ParamList& params, double max_norm);
void zero_grad(const ParamList& params);

}  // namespace dtcil::nn
