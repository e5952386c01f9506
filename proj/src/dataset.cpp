// SPDX-License-Identifier: Apache-2.0

#include "dtcil/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace dtcil {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double smoothstep(double edge, double width, double v) { return 0.5 + 0.5 * std::tanh((edge - v) / width); }

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

void render_toy_sample(int label, int image_size, double pixel_noise, std::uint64_t seed, float* out) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };

  // Foreground and background colours with a guaranteed luminance gap.
  double fg[3], bg[3];
  const double base = uni(0.0, 0.35);
  const bool light_fg = u01(rng) < 0.5;
  for (int c = 0; c < 3; ++c) {
    const double lo = base + uni(0.0, 0.2);
    const double hi = std::min(1.0, lo + uni(0.45, 0.65));
    fg[c] = light_fg ? hi : lo;
    bg[c] = light_fg ? lo : hi;
  }
  const double freq = uni(2.0, 3.0);
  const double phase = uni(0.0, kTwoPi), phase2 = uni(0.0, kTwoPi);
  const double cx = uni(0.35, 0.65), cy = uni(0.35, 0.65);
  const double radius = uni(0.18, 0.3);
  const double thick = uni(0.08, 0.13);
  const double angle = uni(0.0, kTwoPi);
  const double sep = uni(0.22, 0.3);
  const double edge = 1.5 / image_size;

  std::normal_distribution<double> noise(0.0, pixel_noise);
  const int n = image_size;
  const std::size_t plane = static_cast<std::size_t>(n) * n;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double u = (x + 0.5) / n, v = (y + 0.5) / n;
      const double du = u - cx, dv = v - cy;
      const double r = std::sqrt(du * du + dv * dv);
      double m = 0;
      switch (label % 10) {
        case 0: m = 0.5 + 0.5 * std::sin(kTwoPi * freq * v + phase); break;
        case 1: m = 0.5 + 0.5 * std::sin(kTwoPi * freq * u + phase); break;
        case 2: m = 0.5 + 0.5 * std::sin(kTwoPi * freq * (u + v) / std::numbers::sqrt2 + phase); break;
        case 3: m = 0.5 + 0.5 * std::sin(kTwoPi * freq * (u - v) / std::numbers::sqrt2 + phase); break;
        case 4:
          m = 0.5 + 0.5 * std::tanh(4.0 * std::sin(kTwoPi * freq * u + phase) * std::sin(kTwoPi * freq * v + phase2));
          break;
        case 5: m = 0.5 + 0.5 * std::sin(kTwoPi * 2.0 * freq * r + phase); break;
        case 6: m = smoothstep(radius, edge, r); break;
        case 7: {
          const double ox = 0.5 * sep * std::cos(angle), oy = 0.5 * sep * std::sin(angle);
          const double r1 = std::hypot(du - ox, dv - oy), r2 = std::hypot(du + ox, dv + oy);
          m = std::max(smoothstep(0.5 * radius, edge, r1), smoothstep(0.5 * radius, edge, r2));
          break;
        }
        case 8:
          m = std::max(smoothstep(thick * 0.5, edge, std::abs(du)), smoothstep(thick * 0.5, edge, std::abs(dv)));
          break;
        case 9: {
          const double d = std::max(std::abs(du), std::abs(dv));
          m = smoothstep(thick * 0.5, edge, std::abs(d - radius));
          break;
        }
        default: break;
      }
      for (int c = 0; c < 3; ++c) {
        double val = bg[c] * (1 - m) + fg[c] * m + noise(rng);
        out[c * plane + static_cast<std::size_t>(y) * n + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
}

Tensor ImageSplit::gather(const std::vector<int>& idx) const {
  Shape s = images.shape();
  s[0] = static_cast<int>(idx.size());
  Tensor out(s);
  const std::size_t st = images.stride0();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < size(), "sample index out of range");
    std::copy_n(images.data() + idx[i] * st, st, out.data() + i * st);
  }
  return out;
}

const ImageSplit& Dataset::split(const std::string& split_name) const {
  if (split_name == "train") return train;
  if (split_name == "test") return test;
  throw Error("unknown split '" + split_name + "'");
}

std::vector<int> Dataset::indices_of(const std::string& split_name, int label) const {
  const auto& s = split(split_name);
  std::vector<int> out;
  for (int i = 0; i < s.size(); ++i)
    if (s.labels[i] == label) out.push_back(i);
  return out;
}

Dataset make_toy_dataset(const ToyDatasetConfig& cfg) {
  require(cfg.num_classes >= 1 && cfg.num_classes <= 10, "toy dataset supports 1..10 classes");
  require(cfg.image_size >= 8, "toy dataset images must be at least 8x8");
  Dataset d;
  d.name = "toy-patterns";
  d.image_size = cfg.image_size;
  d.num_classes = cfg.num_classes;
  const int s = cfg.image_size;
  auto build = [&](ImageSplit& split, int per_class, std::uint64_t salt) {
    const int total = per_class * cfg.num_classes;
    split.images = Tensor({total, 3, s, s});
    split.labels.resize(total);
    const std::size_t st = split.images.stride0();
    // Interleave classes so contiguous ranges are class-balanced.
    for (int i = 0; i < total; ++i) {
      const int label = i % cfg.num_classes;
      split.labels[i] = label;
      render_toy_sample(label, s, cfg.pixel_noise, mix(mix(cfg.seed, salt), static_cast<std::uint64_t>(i)),
                        split.images.data() + i * st);
    }
  };
  build(d.train, cfg.train_per_class, 1);
  build(d.test, cfg.test_per_class, 2);

  d.channel_mean.assign(3, 0.0f);
  d.channel_std.assign(3, 1.0f);
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    const double cnt = static_cast<double>(d.train.size()) * plane;
    for (int i = 0; i < d.train.size(); ++i) {
      const float* p = d.train.images.data() + d.train.images.offset(i, c, 0, 0);
      for (std::size_t k = 0; k < plane; ++k) {
        sum += p[k];
        sq += static_cast<double>(p[k]) * p[k];
      }
    }
    const double mean = sum / cnt;
    d.channel_mean[c] = static_cast<float>(mean);
    d.channel_std[c] = static_cast<float>(std::sqrt(std::max(sq / cnt - mean * mean, 1e-6)));
  }
  return d;
}

}  // namespace dtcil
