// SPDX-License-Identifier: Apache-2.0
//
// Residual feature extractor with a cosine-similarity classification head.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcil/nn/layers.hpp"

namespace dtcil::model {

using nn::Mode;
using nn::Param;
using nn::ParamList;
using nn::Rng;

struct BackboneConfig {
  int in_channels = 3;
  int image_size = 32;
  /// One entry per residual stage group; stage s > 0 halves the resolution.
  std::vector<int> stage_widths{8, 16, 32};
  int blocks_per_stage = 1;
  /// Fixed input preprocessing applied inside the model: (x - mean) / std per channel.
  std::vector<float> input_mean{0.5f, 0.5f, 0.5f};
  std::vector<float> input_std{0.25f, 0.25f, 0.25f};
  /// Scale multiplying cosine scores before the softmax.
  bool learn_scale = true;
  float initial_scale = 1.0f;

  int feature_dim() const { return stage_widths.back(); }
  int num_stages() const { return static_cast<int>(stage_widths.size()); }
  void validate() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int in_ch, int out_ch, int stride, bool final_relu, const std::string& name);

  void init(Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);
  void params(ParamList& out);
  void bn_layers(std::vector<nn::BatchNorm2d*>& out);
  void set_frozen(bool f);

 private:
  nn::Conv2d conv1_, conv2_, proj_;
  nn::BatchNorm2d bn1_, bn2_, proj_bn_;
  nn::ReLU relu1_, relu_out_;
  bool has_proj_ = false, final_relu_ = true;
};

/// Feature extractor. The last residual block has no output rectifier, so features are unbounded in sign.
class FeatureExtractor {
 public:
  struct Output {
    Tensor features;                // [N, D]
    std::vector<Tensor> stage_maps;  // one [N, C_s, H_s, W_s] map per stage group
  };

  FeatureExtractor() = default;
  FeatureExtractor(const BackboneConfig& cfg, Rng& rng);

  Output forward(const Tensor& images, Mode mode);
  /// `dstage` may be empty or hold empty tensors for stages without gradient. Returns d/d(images) if requested.
  Tensor backward(const Tensor& dfeatures, const std::vector<Tensor>& dstage, bool need_dx);

  void params(ParamList& out);
  void buffers(std::vector<Tensor*>& out);
  std::vector<nn::BatchNorm2d*> bn_layers();
  void set_frozen(bool f);
  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  nn::Conv2d stem_;
  nn::BatchNorm2d stem_bn_;
  nn::ReLU stem_relu_;
  std::vector<std::vector<ResidualBlock>> stages_;
  Shape last_map_shape_;
};

/// Cosine-similarity classifier: logit_c = scale * <w_c, f> / (|w_c| |f|), norms floored at `eps`.
class CosineHead {
 public:
  CosineHead() = default;
  CosineHead(std::vector<int> class_ids, int feature_dim, Rng& rng, float initial_scale, bool learn_scale);

  /// Raw cosine scores in [-1, 1]; [N, C].
  Tensor cosine(const Tensor& features) const;
  /// Scaled logits; caches what backward needs.
  Tensor forward(const Tensor& features);
  /// Accumulates gradients for unfrozen rows and the scale; returns d/d(features).
  Tensor backward(const Tensor& dlogits);

  const std::vector<int>& class_ids() const { return class_ids_; }
  int num_classes() const { return static_cast<int>(class_ids_.size()); }
  int feature_dim() const { return weight.value.rank() == 2 ? weight.value.dim(1) : 0; }
  int index_of(int class_id) const;
  std::vector<float> weight_of(int class_id) const;
  float scale_value() const { return scale.value[0]; }

  /// Appends classes with the given weights; rejects ids already present.
  void append(const std::vector<int>& ids, const std::vector<std::vector<float>>& weights);
  /// Rows [0, n) receive no gradient.
  void freeze_rows(int n) { frozen_rows_ = n; }
  int frozen_rows() const { return frozen_rows_; }
  void params(ParamList& out);
  void set_frozen(bool f) { frozen_ = f; }

  double eps = 1e-12;
  Param weight;  // [C, D]
  Param scale;   // [1]

 private:
  std::vector<int> class_ids_;
  int frozen_rows_ = 0;
  bool frozen_ = false;
  Tensor feat_, cos_;
};

/// Scores of one feature vector against every class of `head`, unscaled.
std::vector<double> cosine_logits(const CosineHead& head, const std::vector<float>& feature);

struct BnRecord {
  std::string layer_id;
  int channels = 0;
  std::vector<double> means;
  std::vector<double> variances;
};

/// Running statistics of every batch-normalization layer of a model, in graph order.
struct BNStatistics {
  std::vector<BnRecord> records;
  bool operator==(const BNStatistics& o) const;
};

class Classifier {
 public:
  struct Output {
    Tensor features;
    std::vector<Tensor> stage_maps;
    Tensor logits;
  };

  Classifier() = default;
  Classifier(const BackboneConfig& cfg, const std::vector<int>& class_ids, std::uint64_t seed);

  Output forward(const Tensor& images, Mode mode);
  /// Backpropagates from logits plus optional direct feature / stage-map gradients.
  Tensor backward(const Tensor& dlogits, const Tensor& dfeatures, const std::vector<Tensor>& dstage, bool need_dx);

  /// Trainable parameters (respects frozen flags; frozen head rows are masked in backward).
  ParamList params();
  std::vector<Tensor*> buffers();
  void set_frozen(bool f);
  bool frozen() const { return frozen_; }

  /// Bit-level checksum over all parameters and running statistics.
  std::uint64_t checksum();

  const BackboneConfig& config() const { return features.config(); }
  const std::vector<int>& class_ids() const { return head.class_ids(); }

  FeatureExtractor features;
  CosineHead head;

 private:
  bool frozen_ = false;
};

/// Features of a batch in evaluation mode.
Tensor extract_features(Classifier& model, const Tensor& images);

/// Mean of the L2-normalized rows of `features` ([N, D]); zero rows are skipped. Not re-normalized.
std::vector<float> imprint_from_features(const Tensor& features, int class_id = -1);

/// Imprinted weight per class: mean of L2-normalized old-model features. Zero-norm features are skipped.
std::map<int, std::vector<float>> imprint_weights(Classifier& old_model, const std::map<int, Tensor>& class_images);

/// Copy of `old_model` whose head also covers the imprinted classes; the result is frozen.
Classifier extend_classifier(const Classifier& old_model, const std::map<int, std::vector<float>>& imprinted);

BNStatistics capture_bn_statistics(Classifier& model, double var_floor = 1e-5);

void save_classifier(const std::filesystem::path& path, Classifier& model);
Classifier load_classifier(const std::filesystem::path& path);

}  // namespace dtcil::model
