// SPDX-License-Identifier: Apache-2.0

#include "dtcil/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace dtcil {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

std::uint64_t checksum_bytes(const void* data, std::size_t bytes, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace dtcil

namespace dtcil::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void fill_normal(Tensor& t, float stddev, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.vec()) v = dist(rng);
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Padding mode, bool bias,
               const std::string& name)
    : weight(name + ".weight", Tensor({out_ch, in_ch, kernel, kernel})),
      in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), mode_(mode), has_bias_(bias) {
  require(in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0 && pad >= 0, "invalid conv configuration " + name);
  if (bias) this->bias = Param(name + ".bias", Tensor({out_ch}));
}

void Conv2d::init(Rng& rng) {
  const float fan_in = static_cast<float>(in_ * k_ * k_);
  fill_normal(weight.value, std::sqrt(2.0f / fan_in), rng);
  if (has_bias_) bias.value.zero();
}

void Conv2d::params(ParamList& out) {
  out.push_back(&weight);
  if (has_bias_) out.push_back(&bias);
}

static inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

// Columns for one sample: row (ci, kh, kw), column output position.
void Conv2d::im2col(const float* xp, int h, int w, float* col) const {
  const std::size_t p = static_cast<std::size_t>(ho_) * wo_;
  for (int ci = 0; ci < in_; ++ci) {
    const float* xc = xp + static_cast<std::size_t>(ci) * h * w;
    for (int kh = 0; kh < k_; ++kh) {
      for (int kw = 0; kw < k_; ++kw) {
        float* dst = col + ((static_cast<std::size_t>(ci) * k_ + kh) * k_ + kw) * p;
        for (int oh = 0; oh < ho_; ++oh) {
          int ih = oh * stride_ - pad_ + kh;
          float* drow = dst + oh * wo_;
          if (ih < 0 || ih >= h) {
            if (mode_ == Padding::Zeros) {
              std::fill(drow, drow + wo_, 0.0f);
              continue;
            }
            ih = reflect_index(ih, h);
          }
          const float* srow = xc + ih * w;
          if (stride_ == 1 && mode_ == Padding::Zeros) {
            // contiguous interior with zero borders
            const int lo = std::max(0, pad_ - kw), hi = std::min(wo_, w + pad_ - kw);
            std::fill(drow, drow + lo, 0.0f);
            if (hi > lo) std::copy(srow + lo - pad_ + kw, srow + hi - pad_ + kw, drow + lo);
            std::fill(drow + std::max(hi, lo), drow + wo_, 0.0f);
            continue;
          }
          for (int ow = 0; ow < wo_; ++ow) {
            int iw = ow * stride_ - pad_ + kw;
            if (iw < 0 || iw >= w) {
              if (mode_ == Padding::Zeros) {
                drow[ow] = 0.0f;
                continue;
              }
              iw = reflect_index(iw, w);
            }
            drow[ow] = srow[iw];
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const float* col, int h, int w, float* dxp) const {
  const std::size_t p = static_cast<std::size_t>(ho_) * wo_;
  for (int ci = 0; ci < in_; ++ci) {
    float* xc = dxp + static_cast<std::size_t>(ci) * h * w;
    for (int kh = 0; kh < k_; ++kh) {
      for (int kw = 0; kw < k_; ++kw) {
        const float* src = col + ((static_cast<std::size_t>(ci) * k_ + kh) * k_ + kw) * p;
        for (int oh = 0; oh < ho_; ++oh) {
          int ih = oh * stride_ - pad_ + kh;
          if (ih < 0 || ih >= h) {
            if (mode_ == Padding::Zeros) continue;
            ih = reflect_index(ih, h);
          }
          float* xrow = xc + ih * w;
          const float* srow = src + oh * wo_;
          for (int ow = 0; ow < wo_; ++ow) {
            int iw = ow * stride_ - pad_ + kw;
            if (iw < 0 || iw >= w) {
              if (mode_ == Padding::Zeros) continue;
              iw = reflect_index(iw, w);
            }
            xrow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) {
  require(x.rank() == 4 && x.dim(1) == in_,
          weight.name + ": expected input with " + std::to_string(in_) + " channels, got " + shape_str(x.shape()));
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  ho_ = (h + 2 * pad_ - k_) / stride_ + 1;
  wo_ = (w + 2 * pad_ - k_) / stride_ + 1;
  require(ho_ > 0 && wo_ > 0, weight.name + ": input too small");
  x_ = x;
  const Eigen::Index p = static_cast<Eigen::Index>(ho_) * wo_;
  const Eigen::Index kk = static_cast<Eigen::Index>(in_) * k_ * k_;
  const bool direct = k_ == 1 && stride_ == 1 && pad_ == 0;

  Tensor out({n, out_, ho_, wo_});
  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(kk * p));
  const CMapMat wm(weight.value.data(), out_, kk);
  for (int s = 0; s < n; ++s) {
    const float* xs = x.data() + x.offset(s, 0, 0, 0);
    if (!direct) im2col(xs, h, w, col.data());
    MapMat ys(out.data() + out.offset(s, 0, 0, 0), out_, p);
    ys.noalias() = wm * CMapMat(direct ? xs : col.data(), kk, p);
    if (has_bias_)
      for (int co = 0; co < out_; ++co) ys.row(co).array() += bias.value[co];
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& dy, bool need_dx) {
  const int n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
  require(dy.rank() == 4 && dy.dim(0) == n && dy.dim(1) == out_ && dy.dim(2) == ho_ && dy.dim(3) == wo_,
          weight.name + ": backward shape mismatch");
  const Eigen::Index p = static_cast<Eigen::Index>(ho_) * wo_;
  const Eigen::Index kk = static_cast<Eigen::Index>(in_) * k_ * k_;
  const bool direct = k_ == 1 && stride_ == 1 && pad_ == 0;

  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(kk * p));
  Tensor dx;
  if (need_dx) dx = Tensor(x_.shape());
  const CMapMat wm(weight.value.data(), out_, kk);
  RowMat dw = RowMat::Zero(out_, kk);
  for (int s = 0; s < n; ++s) {
    const CMapMat g(dy.data() + dy.offset(s, 0, 0, 0), out_, p);
    if (!frozen) {
      const float* xs = x_.data() + x_.offset(s, 0, 0, 0);
      if (!direct) im2col(xs, h, w, col.data());
      dw.noalias() += g * CMapMat(direct ? xs : col.data(), kk, p).transpose();
      if (has_bias_)
        for (int co = 0; co < out_; ++co) bias.grad[co] += g.row(co).sum();
    }
    if (need_dx) {
      float* dxs = dx.data() + dx.offset(s, 0, 0, 0);
      if (direct) {
        MapMat(dxs, kk, p).noalias() = wm.transpose() * g;
      } else {
        MapMat(col.data(), kk, p).noalias() = wm.transpose() * g;
        col2im(col.data(), h, w, dxs);
      }
    }
  }
  if (!frozen) MapMat(weight.grad.data(), out_, kk) += dw;
  return dx;
}

// ----------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, bool affine, const std::string& name, float eps, float momentum)
    : running_mean({channels}, 0.0f), running_var({channels}, 1.0f), c_(channels), affine_(affine), eps_(eps),
      momentum_(momentum) {
  require(channels > 0, "batch norm needs at least one channel");
  if (affine) {
    gamma = Param(name + ".gamma", Tensor({channels}, 1.0f));
    beta = Param(name + ".beta", Tensor({channels}, 0.0f));
  } else {
    gamma.name = name + ".gamma";
    beta.name = name + ".beta";
  }
}

void BatchNorm2d::params(ParamList& out) {
  if (!affine_) return;
  out.push_back(&gamma);
  out.push_back(&beta);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  require(x.rank() == 4 && x.dim(1) == c_, gamma.name + ": channel mismatch, got " + shape_str(x.shape()));
  mode_ = mode;
  x_ = x;
  const int n = x.dim(0), hw = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n) * hw;
  xhat_ = Tensor(x.shape());
  inv_std_.assign(c_, 0.0f);
  Tensor y(x.shape());
  for (int c = 0; c < c_; ++c) {
    double mean, var;
    if (mode == Mode::Eval) {
      mean = running_mean[c];
      var = running_var[c];
    } else {
      require(m > 1, gamma.name + ": batch statistics need more than one value per channel");
      // Row sums in float (vectorized), accumulated across rows in double.
      double s = 0, ss = 0;
      for (int b = 0; b < n; ++b)
        s += Eigen::Map<const Eigen::ArrayXf>(x.data() + x.offset(b, c, 0, 0), hw).sum();
      mean = s / m;
      const float fmean = static_cast<float>(mean);
      for (int b = 0; b < n; ++b)
        ss += (Eigen::Map<const Eigen::ArrayXf>(x.data() + x.offset(b, c, 0, 0), hw) - fmean).square().sum();
      var = ss / m;
      if (mode == Mode::Train) {
        running_mean[c] = static_cast<float>((1 - momentum_) * running_mean[c] + momentum_ * mean);
        running_var[c] = static_cast<float>((1 - momentum_) * running_var[c] + momentum_ * var * m / (m - 1));
      }
    }
    const float istd = static_cast<float>(1.0 / std::sqrt(var + eps_));
    inv_std_[c] = istd;
    const float g = affine_ ? gamma.value[c] : 1.0f;
    const float bt = affine_ ? beta.value[c] : 0.0f;
    const float fm = static_cast<float>(mean);
    for (int b = 0; b < n; ++b) {
      const std::size_t o = x.offset(b, c, 0, 0);
      Eigen::Map<Eigen::ArrayXf> xh(xhat_.data() + o, hw);
      xh = (Eigen::Map<const Eigen::ArrayXf>(x.data() + o, hw) - fm) * istd;
      Eigen::Map<Eigen::ArrayXf>(y.data() + o, hw) = xh * g + bt;
    }
  }
  return y;
}

Tensor BatchNorm2d::backward_from_normalized(const Tensor& dxhat) {
  const int n = x_.dim(0), hw = x_.dim(2) * x_.dim(3);
  const double m = static_cast<double>(n) * hw;
  Tensor dx(x_.shape());
  for (int c = 0; c < c_; ++c) {
    const float istd = inv_std_[c];
    if (mode_ == Mode::Eval) {
      for (int b = 0; b < n; ++b) {
        const std::size_t o = x_.offset(b, c, 0, 0);
        for (int i = 0; i < hw; ++i) dx[o + i] = dxhat[o + i] * istd;
      }
      continue;
    }
    double sd = 0, sdx = 0;
    for (int b = 0; b < n; ++b) {
      const std::size_t o = x_.offset(b, c, 0, 0);
      Eigen::Map<const Eigen::ArrayXf> d(dxhat.data() + o, hw), xh(xhat_.data() + o, hw);
      sd += d.sum();
      sdx += (d * xh).sum();
    }
    const float mean_d = static_cast<float>(sd / m), mean_dx = static_cast<float>(sdx / m);
    for (int b = 0; b < n; ++b) {
      const std::size_t o = x_.offset(b, c, 0, 0);
      Eigen::Map<const Eigen::ArrayXf> d(dxhat.data() + o, hw), xh(xhat_.data() + o, hw);
      Eigen::Map<Eigen::ArrayXf>(dx.data() + o, hw) = istd * (d - mean_d - xh * mean_dx);
    }
  }
  if (!injected_.empty()) {
    dx += injected_;
    injected_ = Tensor();
  }
  return dx;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  require(dy.shape() == x_.shape(), gamma.name + ": backward shape mismatch");
  const int n = x_.dim(0), hw = x_.dim(2) * x_.dim(3);
  Tensor dxhat(dy.shape());
  for (int c = 0; c < c_; ++c) {
    const float g = affine_ ? gamma.value[c] : 1.0f;
    double dg = 0, db = 0;
    for (int b = 0; b < n; ++b) {
      const std::size_t o = x_.offset(b, c, 0, 0);
      Eigen::Map<const Eigen::ArrayXf> d(dy.data() + o, hw), xh(xhat_.data() + o, hw);
      Eigen::Map<Eigen::ArrayXf>(dxhat.data() + o, hw) = d * g;
      dg += (d * xh).sum();
      db += d.sum();
    }
    if (affine_ && !frozen) {
      gamma.grad[c] += static_cast<float>(dg);
      beta.grad[c] += static_cast<float>(db);
    }
  }
  return backward_from_normalized(dxhat);
}

// ------------------------------------------------- ConditionalBatchNorm2d

ConditionalBatchNorm2d::ConditionalBatchNorm2d(int channels, int num_classes, const std::string& name)
    : bn(channels, false, name + ".bn"),
      gamma(name + ".gamma", Tensor({num_classes, channels}, 1.0f)),
      beta(name + ".beta", Tensor({num_classes, channels}, 0.0f)) {
  require(num_classes > 0, "conditional batch norm needs at least one class");
}

void ConditionalBatchNorm2d::params(ParamList& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

Tensor ConditionalBatchNorm2d::forward(const Tensor& x, const std::vector<int>& labels, Mode mode) {
  require(static_cast<int>(labels.size()) == x.dim(0), gamma.name + ": one label per sample required");
  const int k = gamma.value.dim(0), c = gamma.value.dim(1);
  for (int y : labels) require(y >= 0 && y < k, gamma.name + ": label out of range");
  labels_ = labels;
  Tensor xh = bn.forward(x, mode);
  const int n = x.dim(0), hw = x.dim(2) * x.dim(3);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float g = gamma.value.at(labels[b], ch), bt = beta.value.at(labels[b], ch);
      float* p = xh.data() + xh.offset(b, ch, 0, 0);
      for (int i = 0; i < hw; ++i) p[i] = g * p[i] + bt;
    }
  return xh;
}

Tensor ConditionalBatchNorm2d::backward(const Tensor& dy) {
  const Tensor& xhat = bn.normalized();
  require(dy.shape() == xhat.shape(), gamma.name + ": backward shape mismatch");
  const int n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
  Tensor dxhat(dy.shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const int y = labels_[b];
      const float g = gamma.value.at(y, ch);
      const std::size_t o = dy.offset(b, ch, 0, 0);
      double dg = 0, db = 0;
      for (int i = 0; i < hw; ++i) {
        dxhat[o + i] = dy[o + i] * g;
        dg += static_cast<double>(dy[o + i]) * xhat[o + i];
        db += dy[o + i];
      }
      gamma.grad.at(y, ch) += static_cast<float>(dg);
      beta.grad.at(y, ch) += static_cast<float>(db);
    }
  return bn.backward_from_normalized(dxhat);
}

// ------------------------------------------------------------ activations

Tensor ReLU::forward(const Tensor& x) {
  x_ = x;
  Tensor y = x;
  for (auto& v : y.vec()) v = v > 0 ? v : 0.0f;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) const {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x_[i] <= 0) dx[i] = 0;
  return dx;
}

Tensor LeakyReLU::forward(const Tensor& x) {
  x_ = x;
  Tensor y = x;
  for (auto& v : y.vec()) v = v > 0 ? v : slope_ * v;
  return y;
}

Tensor LeakyReLU::backward(const Tensor& dy) const {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x_[i] <= 0) dx[i] *= slope_;
  return dx;
}

Tensor Tanh::forward(const Tensor& x) {
  y_ = x;
  for (auto& v : y_.vec()) v = std::tanh(v);
  return y_;
}

Tensor Tanh::backward(const Tensor& dy) const {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= 1.0f - y_[i] * y_[i];
  return dx;
}

// ------------------------------------------------------- shape helpers

namespace {

// Source index pair and weights for half-pixel-centred 2x bilinear upsampling.
struct Tap1d {
  int i0, i1;
  float w0, w1;
};

std::vector<Tap1d> bilinear_taps(int in) {
  std::vector<Tap1d> taps(static_cast<std::size_t>(in) * 2);
  for (int o = 0; o < 2 * in; ++o) {
    float src = (o + 0.5f) / 2.0f - 0.5f;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    const float l = src - static_cast<float>(i0);
    taps[o] = {i0, i1, 1.0f - l, l};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear2x(const Tensor& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto th = bilinear_taps(h), tw = bilinear_taps(w);
  Tensor y({n, c, 2 * h, 2 * w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float* src = x.data() + x.offset(b, ch, 0, 0);
      float* dst = y.data() + y.offset(b, ch, 0, 0);
      for (int oh = 0; oh < 2 * h; ++oh) {
        const auto& a = th[oh];
        for (int ow = 0; ow < 2 * w; ++ow) {
          const auto& q = tw[ow];
          dst[oh * 2 * w + ow] = a.w0 * (q.w0 * src[a.i0 * w + q.i0] + q.w1 * src[a.i0 * w + q.i1]) +
                                 a.w1 * (q.w0 * src[a.i1 * w + q.i0] + q.w1 * src[a.i1 * w + q.i1]);
        }
      }
    }
  return y;
}

Tensor upsample_bilinear2x_backward(const Tensor& dy, const Shape& in_shape) {
  const int n = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3];
  const auto th = bilinear_taps(h), tw = bilinear_taps(w);
  Tensor dx(in_shape);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float* src = dy.data() + dy.offset(b, ch, 0, 0);
      float* dst = dx.data() + dx.offset(b, ch, 0, 0);
      for (int oh = 0; oh < 2 * h; ++oh) {
        const auto& a = th[oh];
        for (int ow = 0; ow < 2 * w; ++ow) {
          const auto& q = tw[ow];
          const float g = src[oh * 2 * w + ow];
          dst[a.i0 * w + q.i0] += a.w0 * q.w0 * g;
          dst[a.i0 * w + q.i1] += a.w0 * q.w1 * g;
          dst[a.i1 * w + q.i0] += a.w1 * q.w0 * g;
          dst[a.i1 * w + q.i1] += a.w1 * q.w1 * g;
        }
      }
    }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float* p = x.data() + x.offset(b, ch, 0, 0);
      double s = 0;
      for (int i = 0; i < hw; ++i) s += p[i];
      y.at(b, ch) = static_cast<float>(s / hw);
    }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& dy, const Shape& in_shape) {
  Tensor dx(in_shape);
  const int n = in_shape[0], c = in_shape[1], hw = in_shape[2] * in_shape[3];
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float g = dy.at(b, ch) / static_cast<float>(hw);
      float* p = dx.data() + dx.offset(b, ch, 0, 0);
      for (int i = 0; i < hw; ++i) p[i] = g;
    }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "skip concatenation spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor y({n, ca + cb, a.dim(2), a.dim(3)});
  for (int s = 0; s < n; ++s) {
    std::copy_n(a.data() + a.offset(s, 0, 0, 0), static_cast<std::size_t>(ca) * hw, y.data() + y.offset(s, 0, 0, 0));
    std::copy_n(b.data() + b.offset(s, 0, 0, 0), static_cast<std::size_t>(cb) * hw, y.data() + y.offset(s, ca, 0, 0));
  }
  return y;
}

void split_channels(const Tensor& d, int ca, Tensor& da, Tensor& db) {
  const int n = d.dim(0), cb = d.dim(1) - ca, hw = d.dim(2) * d.dim(3);
  da = Tensor({n, ca, d.dim(2), d.dim(3)});
  db = Tensor({n, cb, d.dim(2), d.dim(3)});
  for (int s = 0; s < n; ++s) {
    std::copy_n(d.data() + d.offset(s, 0, 0, 0), static_cast<std::size_t>(ca) * hw, da.data() + da.offset(s, 0, 0, 0));
    std::copy_n(d.data() + d.offset(s, ca, 0, 0), static_cast<std::size_t>(cb) * hw, db.data() + db.offset(s, 0, 0, 0));
  }
}

// -------------------------------------------------------------- gradients

double grad_norm(const ParamList& params) {
  double s = 0;
  for (const Param* p : params)
    for (float g : p->grad.vec()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const float scale = static_cast<float>(max_norm / (norm + 1e-12));
    for (Param* p : params) p->grad *= scale;
  }
  return norm;
}

void zero_grad(const ParamList& params) {
  for (Param* p : params) p->zero_grad();
}

}  // namespace dtcil::nn
