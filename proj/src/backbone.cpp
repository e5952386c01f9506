// SPDX-License-Identifier: Apache-2.0

#include "dtcil/backbone.hpp"

#include <cmath>
#include <iostream>

#include "dtcil/io.hpp"

namespace dtcil::model {

using nlohmann::json;

void BackboneConfig::validate() const {
  require(in_channels > 0, "backbone needs input channels");
  require(!stage_widths.empty(), "backbone needs at least one stage");
  require(blocks_per_stage >= 1, "backbone needs at least one block per stage");
  require(static_cast<int>(input_mean.size()) == in_channels && static_cast<int>(input_std.size()) == in_channels,
          "input normalization must have one entry per channel");
  for (float s : input_std) require(s > 0, "input std must be positive");
  const int down = 1 << (num_stages() - 1);
  require(image_size >= down && image_size % down == 0,
          "image size " + std::to_string(image_size) + " is not divisible by the stage downsampling");
}

void to_json(json& j, const BackboneConfig& c) {
  j = json{{"in_channels", c.in_channels},   {"image_size", c.image_size},   {"stage_widths", c.stage_widths},
           {"blocks_per_stage", c.blocks_per_stage}, {"input_mean", c.input_mean}, {"input_std", c.input_std},
           {"learn_scale", c.learn_scale},   {"initial_scale", c.initial_scale}};
}

void from_json(const json& j, BackboneConfig& c) {
  c.in_channels = j.at("in_channels").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  c.input_mean = j.at("input_mean").get<std::vector<float>>();
  c.input_std = j.at("input_std").get<std::vector<float>>();
  c.learn_scale = j.at("learn_scale").get<bool>();
  c.initial_scale = j.at("initial_scale").get<float>();
}

// ---------------------------------------------------------- ResidualBlock

ResidualBlock::ResidualBlock(int in_ch, int out_ch, int stride, bool final_relu, const std::string& name)
    : conv1_(in_ch, out_ch, 3, stride, 1, nn::Padding::Zeros, false, name + ".conv1"),
      conv2_(out_ch, out_ch, 3, 1, 1, nn::Padding::Zeros, false, name + ".conv2"),
      bn1_(out_ch, true, name + ".bn1"),
      bn2_(out_ch, true, name + ".bn2"),
      has_proj_(stride != 1 || in_ch != out_ch),
      final_relu_(final_relu) {
  if (has_proj_) {
    proj_ = nn::Conv2d(in_ch, out_ch, 1, stride, 0, nn::Padding::Zeros, false, name + ".proj");
    proj_bn_ = nn::BatchNorm2d(out_ch, true, name + ".proj_bn");
  }
}

void ResidualBlock::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  if (has_proj_) proj_.init(rng);
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
  Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x), mode));
  h = bn2_.forward(conv2_.forward(h), mode);
  if (has_proj_)
    h += proj_bn_.forward(proj_.forward(x), mode);
  else
    h += x;
  return final_relu_ ? relu_out_.forward(h) : h;
}

Tensor ResidualBlock::backward(const Tensor& dy) {
  const Tensor g = final_relu_ ? relu_out_.backward(dy) : dy;
  Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g)))));
  if (has_proj_)
    dx += proj_.backward(proj_bn_.backward(g));
  else
    dx += g;
  return dx;
}

void ResidualBlock::params(ParamList& out) {
  conv1_.params(out);
  bn1_.params(out);
  conv2_.params(out);
  bn2_.params(out);
  if (has_proj_) {
    proj_.params(out);
    proj_bn_.params(out);
  }
}

void ResidualBlock::bn_layers(std::vector<nn::BatchNorm2d*>& out) {
  out.push_back(&bn1_);
  out.push_back(&bn2_);
  if (has_proj_) out.push_back(&proj_bn_);
}

void ResidualBlock::set_frozen(bool f) {
  conv1_.frozen = conv2_.frozen = proj_.frozen = f;
  bn1_.frozen = bn2_.frozen = proj_bn_.frozen = f;
}

// ------------------------------------------------------- FeatureExtractor

FeatureExtractor::FeatureExtractor(const BackboneConfig& cfg, Rng& rng)
    : cfg_(cfg),
      stem_(cfg.in_channels, cfg.stage_widths[0], 3, 1, 1, nn::Padding::Zeros, false, "stem.conv"),
      stem_bn_(cfg.stage_widths[0], true, "stem.bn") {
  cfg.validate();
  stem_.init(rng);
  int in = cfg.stage_widths[0];
  for (int s = 0; s < cfg.num_stages(); ++s) {
    std::vector<ResidualBlock> blocks;
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const bool last = s + 1 == cfg.num_stages() && b + 1 == cfg.blocks_per_stage;
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      blocks.emplace_back(in, cfg.stage_widths[s], stride, !last,
                          "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1));
      blocks.back().init(rng);
      in = cfg.stage_widths[s];
    }
    stages_.push_back(std::move(blocks));
  }
}

FeatureExtractor::Output FeatureExtractor::forward(const Tensor& images, Mode mode) {
  require(images.rank() == 4 && images.dim(1) == cfg_.in_channels && images.dim(2) == cfg_.image_size &&
              images.dim(3) == cfg_.image_size,
          "input shape " + shape_str(images.shape()) + " does not match the model's " +
              std::to_string(cfg_.in_channels) + "x" + std::to_string(cfg_.image_size) + "x" +
              std::to_string(cfg_.image_size));
  Tensor x = images;
  const int n = x.dim(0), hw = x.dim(2) * x.dim(3);
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < cfg_.in_channels; ++c) {
      float* p = x.data() + x.offset(b, c, 0, 0);
      const float m = cfg_.input_mean[c], inv = 1.0f / cfg_.input_std[c];
      for (int i = 0; i < hw; ++i) p[i] = (p[i] - m) * inv;
    }
  Output out;
  Tensor h = stem_relu_.forward(stem_bn_.forward(stem_.forward(x), mode));
  for (auto& blocks : stages_) {
    for (auto& blk : blocks) h = blk.forward(h, mode);
    out.stage_maps.push_back(h);
  }
  last_map_shape_ = h.shape();
  out.features = nn::global_avg_pool(h);
  return out;
}

Tensor FeatureExtractor::backward(const Tensor& dfeatures, const std::vector<Tensor>& dstage, bool need_dx) {
  Tensor g = nn::global_avg_pool_backward(dfeatures, last_map_shape_);
  for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
    if (static_cast<std::size_t>(s) < dstage.size() && !dstage[s].empty()) g += dstage[s];
    auto& blocks = stages_[s];
    for (int b = static_cast<int>(blocks.size()) - 1; b >= 0; --b) g = blocks[b].backward(g);
  }
  g = stem_.backward(stem_bn_.backward(stem_relu_.backward(g)), need_dx);
  if (!need_dx) return {};
  const int n = g.dim(0), hw = g.dim(2) * g.dim(3);
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < cfg_.in_channels; ++c) {
      float* p = g.data() + g.offset(b, c, 0, 0);
      const float inv = 1.0f / cfg_.input_std[c];
      for (int i = 0; i < hw; ++i) p[i] *= inv;
    }
  return g;
}

void FeatureExtractor::params(ParamList& out) {
  stem_.params(out);
  stem_bn_.params(out);
  for (auto& blocks : stages_)
    for (auto& blk : blocks) blk.params(out);
}

std::vector<nn::BatchNorm2d*> FeatureExtractor::bn_layers() {
  std::vector<nn::BatchNorm2d*> out{&stem_bn_};
  for (auto& blocks : stages_)
    for (auto& blk : blocks) blk.bn_layers(out);
  return out;
}

void FeatureExtractor::buffers(std::vector<Tensor*>& out) {
  for (auto* bn : bn_layers()) bn->buffers(out);
}

void FeatureExtractor::set_frozen(bool f) {
  stem_.frozen = f;
  stem_bn_.frozen = f;
  for (auto& blocks : stages_)
    for (auto& blk : blocks) blk.set_frozen(f);
}

// ------------------------------------------------------------- CosineHead

CosineHead::CosineHead(std::vector<int> class_ids, int feature_dim, Rng& rng, float initial_scale, bool learn_scale)
    : weight("head.weight", Tensor({static_cast<int>(class_ids.size()), feature_dim})),
      scale("head.scale", Tensor({1}, initial_scale)),
      class_ids_(std::move(class_ids)) {
  require(feature_dim > 0, "cosine head needs a positive feature dimension");
  for (std::size_t i = 0; i < class_ids_.size(); ++i)
    for (std::size_t j = 0; j < i; ++j) require(class_ids_[i] != class_ids_[j], "duplicate class id in head");
  nn::fill_normal(weight.value, 1.0f / std::sqrt(static_cast<float>(feature_dim)), rng);
  scale.trainable = learn_scale;
}

int CosineHead::index_of(int class_id) const {
  for (std::size_t i = 0; i < class_ids_.size(); ++i)
    if (class_ids_[i] == class_id) return static_cast<int>(i);
  return -1;
}

std::vector<float> CosineHead::weight_of(int class_id) const {
  const int r = index_of(class_id);
  require(r >= 0, "class " + std::to_string(class_id) + " not in head");
  const int d = feature_dim();
  return {weight.value.data() + static_cast<std::size_t>(r) * d, weight.value.data() + static_cast<std::size_t>(r + 1) * d};
}

Tensor CosineHead::cosine(const Tensor& features) const {
  require(features.rank() == 2 && features.dim(1) == feature_dim(),
          "feature length " + (features.rank() == 2 ? std::to_string(features.dim(1)) : shape_str(features.shape())) +
              " does not match head dimension " + std::to_string(feature_dim()));
  const int n = features.dim(0), c = num_classes(), d = feature_dim();
  std::vector<double> wn(static_cast<std::size_t>(c));
  for (int k = 0; k < c; ++k) {
    double s = 0;
    for (int i = 0; i < d; ++i) s += static_cast<double>(weight.value.at(k, i)) * weight.value.at(k, i);
    wn[k] = std::sqrt(s);
    if (eps <= 0) require(wn[k] > 0, "zero-norm class weight with eps = 0");
    wn[k] = std::max(wn[k], eps);
  }
  Tensor out({n, c});
  for (int b = 0; b < n; ++b) {
    double fs = 0;
    for (int i = 0; i < d; ++i) fs += static_cast<double>(features.at(b, i)) * features.at(b, i);
    double fn = std::sqrt(fs);
    if (eps <= 0) require(fn > 0, "zero feature with eps = 0");
    fn = std::max(fn, eps);
    for (int k = 0; k < c; ++k) {
      double dot = 0;
      for (int i = 0; i < d; ++i) dot += static_cast<double>(features.at(b, i)) * weight.value.at(k, i);
      out.at(b, k) = static_cast<float>(dot / (wn[k] * fn));
    }
  }
  return out;
}

Tensor CosineHead::forward(const Tensor& features) {
  feat_ = features;
  cos_ = cosine(features);
  Tensor logits = cos_;
  logits *= scale.value[0];
  return logits;
}

Tensor CosineHead::backward(const Tensor& dlogits) {
  const int n = feat_.dim(0), c = num_classes(), d = feature_dim();
  require(dlogits.rank() == 2 && dlogits.dim(0) == n && dlogits.dim(1) == c, "head backward shape mismatch");
  const double s = scale.value[0];
  std::vector<double> wn(static_cast<std::size_t>(c));
  for (int k = 0; k < c; ++k) {
    double acc = 0;
    for (int i = 0; i < d; ++i) acc += static_cast<double>(weight.value.at(k, i)) * weight.value.at(k, i);
    wn[k] = std::max(std::sqrt(acc), eps);
  }
  Tensor df({n, d});
  double dscale = 0;
  std::vector<double> dfrow(static_cast<std::size_t>(d));
  for (int b = 0; b < n; ++b) {
    double fs = 0;
    for (int i = 0; i < d; ++i) fs += static_cast<double>(feat_.at(b, i)) * feat_.at(b, i);
    const double fn = std::max(std::sqrt(fs), eps);
    std::fill(dfrow.begin(), dfrow.end(), 0.0);
    for (int k = 0; k < c; ++k) {
      const double g = dlogits.at(b, k);
      if (g == 0) continue;
      const double cs = cos_.at(b, k);
      dscale += g * cs;
      const double gs = g * s;
      for (int i = 0; i < d; ++i) {
        const double f = feat_.at(b, i), w = weight.value.at(k, i);
        dfrow[i] += gs * (w / (wn[k] * fn) - cs * f / (fn * fn));
      }
      if (!frozen_ && k >= frozen_rows_) {
        for (int i = 0; i < d; ++i) {
          const double f = feat_.at(b, i), w = weight.value.at(k, i);
          weight.grad.at(k, i) += static_cast<float>(gs * (f / (wn[k] * fn) - cs * w / (wn[k] * wn[k])));
        }
      }
    }
    for (int i = 0; i < d; ++i) df.at(b, i) = static_cast<float>(dfrow[i]);
  }
  if (!frozen_ && scale.trainable) scale.grad[0] += static_cast<float>(dscale);
  return df;
}

void CosineHead::append(const std::vector<int>& ids, const std::vector<std::vector<float>>& weights) {
  require(ids.size() == weights.size(), "one weight vector per appended class required");
  const int d = feature_dim();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(index_of(ids[i]) < 0, "class id collision: " + std::to_string(ids[i]) + " already in head");
    for (std::size_t j = 0; j < i; ++j) require(ids[j] != ids[i], "duplicate class id in imprint set");
    require(static_cast<int>(weights[i].size()) == d, "imprinted weight has wrong dimension");
  }
  const int c0 = num_classes(), c1 = c0 + static_cast<int>(ids.size());
  Tensor w({c1, d});
  std::copy(weight.value.vec().begin(), weight.value.vec().end(), w.vec().begin());
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(weights[i].begin(), weights[i].end(), w.data() + static_cast<std::size_t>(c0 + i) * d);
  weight.value = std::move(w);
  weight.grad = Tensor(weight.value.shape());
  class_ids_.insert(class_ids_.end(), ids.begin(), ids.end());
}

void CosineHead::params(ParamList& out) {
  weight.frozen_prefix = static_cast<std::size_t>(frozen_rows_) * feature_dim();
  out.push_back(&weight);
  out.push_back(&scale);
}

std::vector<double> cosine_logits(const CosineHead& head, const std::vector<float>& feature) {
  Tensor f({1, static_cast<int>(feature.size())}, feature);
  Tensor c = head.cosine(f);
  return {c.vec().begin(), c.vec().end()};
}

bool BNStatistics::operator==(const BNStatistics& o) const {
  if (records.size() != o.records.size()) return false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto &a = records[i], &b = o.records[i];
    if (a.layer_id != b.layer_id || a.channels != b.channels || a.means != b.means || a.variances != b.variances)
      return false;
  }
  return true;
}

// ------------------------------------------------------------- Classifier

Classifier::Classifier(const BackboneConfig& cfg, const std::vector<int>& class_ids, std::uint64_t seed) {
  Rng rng(seed);
  features = FeatureExtractor(cfg, rng);
  head = CosineHead(class_ids, cfg.feature_dim(), rng, cfg.initial_scale, cfg.learn_scale);
}

Classifier::Output Classifier::forward(const Tensor& images, Mode mode) {
  auto f = features.forward(images, mode);
  Output out;
  out.logits = head.forward(f.features);
  out.features = std::move(f.features);
  out.stage_maps = std::move(f.stage_maps);
  return out;
}

Tensor Classifier::backward(const Tensor& dlogits, const Tensor& dfeatures, const std::vector<Tensor>& dstage,
                            bool need_dx) {
  Tensor df = head.backward(dlogits);
  if (!dfeatures.empty()) df += dfeatures;
  return features.backward(df, dstage, need_dx);
}

ParamList Classifier::params() {
  ParamList out;
  if (frozen_) return out;
  features.params(out);
  head.params(out);
  ParamList trainable;
  for (Param* p : out)
    if (p->trainable) trainable.push_back(p);
  return trainable;
}

std::vector<Tensor*> Classifier::buffers() {
  std::vector<Tensor*> out;
  features.buffers(out);
  return out;
}

void Classifier::set_frozen(bool f) {
  frozen_ = f;
  features.set_frozen(f);
  head.set_frozen(f);
}

std::uint64_t Classifier::checksum() {
  ParamList ps;
  features.params(ps);
  head.params(ps);
  std::uint64_t h = 1469598103934665603ULL;
  for (Param* p : ps) h = checksum_bytes(p->value.data(), p->value.size() * sizeof(float), h);
  for (Tensor* t : buffers()) h = checksum_bytes(t->data(), t->size() * sizeof(float), h);
  for (int c : class_ids()) h = checksum_bytes(&c, sizeof c, h);
  return h;
}

Tensor extract_features(Classifier& model, const Tensor& images) {
  return model.features.forward(images, Mode::Eval).features;
}

std::vector<float> imprint_from_features(const Tensor& f, int class_id) {
  const std::string tag = class_id >= 0 ? "class " + std::to_string(class_id) : std::string("imprint set");
  require(f.rank() == 2 && f.dim(0) >= 1, tag + " has no samples to imprint");
  const int d = f.dim(1);
  std::vector<double> acc(static_cast<std::size_t>(d), 0.0);
  int used = 0;
  for (int b = 0; b < f.dim(0); ++b) {
    double s = 0;
    for (int i = 0; i < d; ++i) s += static_cast<double>(f.at(b, i)) * f.at(b, i);
    const double norm = std::sqrt(s);
    if (norm == 0) {
      std::cerr << "warning: zero-norm feature skipped while imprinting " << tag << '\n';
      continue;
    }
    for (int i = 0; i < d; ++i) acc[i] += f.at(b, i) / norm;
    ++used;
  }
  require(used > 0, tag + " has only zero-norm features");
  std::vector<float> w(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) w[i] = static_cast<float>(acc[i] / used);
  return w;
}

std::map<int, std::vector<float>> imprint_weights(Classifier& old_model, const std::map<int, Tensor>& class_images) {
  std::map<int, std::vector<float>> out;
  for (const auto& [cls, imgs] : class_images) {
    require(imgs.rank() == 4 && imgs.dim(0) >= 1, "class " + std::to_string(cls) + " has no samples to imprint");
    out.emplace(cls, imprint_from_features(extract_features(old_model, imgs), cls));
  }
  return out;
}

Classifier extend_classifier(const Classifier& old_model, const std::map<int, std::vector<float>>& imprinted) {
  Classifier ext = old_model;
  std::vector<int> ids;
  std::vector<std::vector<float>> ws;
  for (const auto& [c, w] : imprinted) {
    ids.push_back(c);
    ws.push_back(w);
  }
  ext.head.append(ids, ws);
  ext.set_frozen(true);
  return ext;
}

BNStatistics capture_bn_statistics(Classifier& model, double var_floor) {
  BNStatistics st;
  auto layers = model.features.bn_layers();
  require(!layers.empty(), "model has no batch-normalization layers");
  for (auto* bn : layers) {
    BnRecord r;
    r.layer_id = bn->gamma.name.substr(0, bn->gamma.name.rfind('.'));
    r.channels = bn->channels();
    for (int c = 0; c < r.channels; ++c) {
      r.means.push_back(bn->running_mean[c]);
      r.variances.push_back(std::max<double>(bn->running_var[c], var_floor));
    }
    st.records.push_back(std::move(r));
  }
  return st;
}

void save_classifier(const std::filesystem::path& path, Classifier& model) {
  ParamList ps;
  model.features.params(ps);
  model.head.params(ps);
  std::vector<const Tensor*> arrays;
  json names = json::array();
  for (Param* p : ps) {
    arrays.push_back(&p->value);
    names.push_back(p->name);
  }
  for (Tensor* t : model.buffers()) arrays.push_back(t);
  json meta{{"kind", "classifier"},
            {"config", model.config()},
            {"class_ids", model.class_ids()},
            {"frozen_rows", model.head.frozen_rows()},
            {"params", names}};
  io::write_tensors(path, meta, arrays);
}

Classifier load_classifier(const std::filesystem::path& path) {
  auto file = io::read_tensors(path);
  require(file.meta.value("kind", "") == "classifier", path.string() + " is not a classifier checkpoint");
  const auto cfg = file.meta.at("config").get<BackboneConfig>();
  const auto ids = file.meta.at("class_ids").get<std::vector<int>>();
  Classifier m(cfg, ids, 0);
  m.head.freeze_rows(file.meta.at("frozen_rows").get<int>());
  ParamList ps;
  m.features.params(ps);
  m.head.params(ps);
  auto bufs = m.buffers();
  require(file.arrays.size() == ps.size() + bufs.size(), "checkpoint array count does not match architecture");
  std::size_t k = 0;
  for (Param* p : ps) {
    require(file.arrays[k].shape() == p->value.shape(), "checkpoint shape mismatch for " + p->name);
    p->value = std::move(file.arrays[k++]);
  }
  for (Tensor* t : bufs) {
    require(file.arrays[k].shape() == t->shape(), "checkpoint buffer shape mismatch");
    *t = std::move(file.arrays[k++]);
  }
  return m;
}

}  // namespace dtcil::model
