// SPDX-License-Identifier: Apache-2.0
//
// Procedural image dataset used for desk-scale experiments. Every class is a
// distinct spatial pattern drawn with random colours, phase, frequency and
// position, so class identity lives in shape rather than colour.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtcil/tensor.hpp"

namespace dtcil {

struct ImageSplit {
  Tensor images;  // [N, C, H, W], values in [0, 1]
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  /// Gathers the given sample indices into one batch.
  Tensor gather(const std::vector<int>& idx) const;
};

struct ToyDatasetConfig {
  int num_classes = 10;
  int image_size = 32;
  int train_per_class = 500;
  int test_per_class = 100;
  double pixel_noise = 0.06;
  std::uint64_t seed = 7;
};

struct Dataset {
  std::string name;
  int channels = 3;
  int image_size = 0;
  int num_classes = 0;
  ImageSplit train, test;
  /// Per-channel statistics of the training split, used as the models' input normalization.
  std::vector<float> channel_mean, channel_std;

  const ImageSplit& split(const std::string& name) const;
  /// Indices of samples of `label` in the given split.
  std::vector<int> indices_of(const std::string& split_name, int label) const;
};

Dataset make_toy_dataset(const ToyDatasetConfig& cfg);

/// Renders one sample of `label`; deterministic in (seed, label, salt).
void render_toy_sample(int label, int image_size, double pixel_noise, std::uint64_t seed, float* out);

}  // namespace dtcil
