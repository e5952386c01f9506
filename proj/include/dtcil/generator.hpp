// SPDX-License-Identifier: Apache-2.0
//
// Label-conditioned image generator trained without data against a frozen
// classifier (teacher cross-entropy plus batch-norm statistics matching).

#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcil/backbone.hpp"
#include "dtcil/nn/optim.hpp"

namespace dtcil::gen {

using nn::Mode;
using nn::Param;
using nn::ParamList;
using nn::Rng;

struct GeneratorConfig {
  int num_classes = 1;
  int noise_size = 4;
  int noise_channels = 64;
  int image_size = 32;
  int out_channels = 3;
  /// Block widths from the noise resolution upward; image_size = noise_size * 2^(widths.size() - 1).
  std::vector<int> widths{64, 32, 16, 8};
  std::uint64_t seed = 1;

  int up_levels() const { return static_cast<int>(widths.size()) - 1; }
  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

/// Reflection-padded convolution, conditional BN, leaky rectifier.
class GenBlock {
 public:
  GenBlock() = default;
  GenBlock(int in_ch, int out_ch, int kernel, int stride, int num_classes, const std::string& name);
  void init(Rng& rng) { conv_.init(rng); }
  Tensor forward(const Tensor& x, const std::vector<int>& labels, Mode mode);
  Tensor backward(const Tensor& dy);
  void params(ParamList& out);
  void buffers(std::vector<Tensor*>& out) { cbn_.buffers(out); }

 private:
  nn::Conv2d conv_;
  nn::ConditionalBatchNorm2d cbn_;
  nn::LeakyReLU act_{0.2f};
};

/// U-shaped generator: an encoder/decoder pair with a skip concatenation at the noise
/// resolution, followed by bilinear-upsampling blocks up to the image resolution and a
/// tanh output mapped to [0, 1].
class ConditionalGenerator {
 public:
  ConditionalGenerator() = default;
  explicit ConditionalGenerator(const GeneratorConfig& cfg);

  /// z: [N, noise_channels, noise_size, noise_size]; labels index the generator's classes.
  Tensor forward(const Tensor& z, const std::vector<int>& labels, Mode mode);
  Tensor backward(const Tensor& dimages);

  ParamList params();
  std::vector<Tensor*> buffers();
  std::uint64_t checksum();
  const GeneratorConfig& config() const { return cfg_; }

  /// Spatial shapes of the (encoder, decoder) maps at each skip, from the last forward.
  const std::vector<std::pair<Shape, Shape>>& skip_shapes() const { return skip_shapes_; }

 private:
  GeneratorConfig cfg_;
  GenBlock enc0_, enc1_, dec0_;
  std::vector<GenBlock> ups_;
  nn::Conv2d out_conv_;
  nn::Tanh tanh_;
  Shape enc1_shape_;
  std::vector<Shape> up_in_shapes_;
  std::vector<std::pair<Shape, Shape>> skip_shapes_;
};

/// Standard-normal noise and i.i.d. labels drawn uniformly from a designated class set.
class NoiseLabelSampler {
 public:
  NoiseLabelSampler(std::vector<int> classes, std::uint64_t seed);
  void draw(int batch, const GeneratorConfig& cfg, Tensor& z, std::vector<int>& labels);
  const std::vector<int>& classes() const { return classes_; }

 private:
  std::vector<int> classes_;
  Rng rng_;
};

struct Samples {
  Tensor images;
  std::vector<int> labels;  // generator class indices
};

/// Fresh noise per call; batch statistics in the generator, running statistics untouched.
Samples sample(ConditionalGenerator& g, int batch_size, NoiseLabelSampler& sampler);

struct GeneratorLosses {
  double ce = 0;
  double bns = 0;
};

/// Owns the optimizer state for one generator trained against one frozen teacher.
class GeneratorTrainer {
 public:
  struct Options {
    int batch_size = 64;
    double lr = 1e-3;
    double beta1 = 0.5;
    bool use_ce = true;
    bool use_bns = true;
  };

  GeneratorTrainer(ConditionalGenerator& g, model::Classifier& teacher, Options opt, std::uint64_t seed);

  GeneratorLosses step();
  /// Losses on a fresh batch without updating anything.
  GeneratorLosses evaluate(int batch_size);
  long steps() const { return steps_; }
  NoiseLabelSampler& sampler() { return sampler_; }
  const model::BNStatistics& teacher_stats() const { return stats_; }

 private:
  GeneratorLosses run(const Samples& s, bool update);

  ConditionalGenerator& g_;
  model::Classifier& teacher_;
  Options opt_;
  model::BNStatistics stats_;
  NoiseLabelSampler sampler_;
  nn::Adam adam_;
  long steps_ = 0;
};

/// Fraction of fresh samples the teacher labels as the fed class.
double label_agreement(ConditionalGenerator& g, model::Classifier& teacher, int n, std::uint64_t seed);

void save_generator(const std::filesystem::path& path, ConditionalGenerator& g);
ConditionalGenerator load_generator(const std::filesystem::path& path);

/// One row per class (with a class-id glyph column), `per_class` samples per row; [3, H, W].
Tensor sample_grid(ConditionalGenerator& g, const std::vector<int>& class_ids, int per_class, std::uint64_t seed);

}  // namespace dtcil::gen
