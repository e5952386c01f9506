// SPDX-License-Identifier: Apache-2.0

#include "dtcil/generator.hpp"

#include <cmath>

#include "dtcil/io.hpp"
#include "dtcil/losses.hpp"

namespace dtcil::gen {

using nlohmann::json;

void GeneratorConfig::validate() const {
  require(num_classes >= 1, "generator needs at least one class");
  require(noise_size >= 2 && noise_size % 2 == 0, "noise size must be even and at least 2");
  require(noise_channels >= 1 && out_channels >= 1, "generator channel counts must be positive");
  require(!widths.empty(), "generator needs at least one block width");
  for (int w : widths) require(w >= 1, "generator widths must be positive");
  require(image_size == noise_size * (1 << up_levels()),
          "image size " + std::to_string(image_size) + " must equal noise size " + std::to_string(noise_size) +
              " times 2^" + std::to_string(up_levels()));
}

void to_json(json& j, const GeneratorConfig& c) {
  j = json{{"num_classes", c.num_classes}, {"noise_size", c.noise_size}, {"noise_channels", c.noise_channels},
           {"image_size", c.image_size},   {"out_channels", c.out_channels}, {"widths", c.widths},
           {"seed", c.seed}};
}

void from_json(const json& j, GeneratorConfig& c) {
  c.num_classes = j.at("num_classes").get<int>();
  c.noise_size = j.at("noise_size").get<int>();
  c.noise_channels = j.at("noise_channels").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

GenBlock::GenBlock(int in_ch, int out_ch, int kernel, int stride, int num_classes, const std::string& name)
    : conv_(in_ch, out_ch, kernel, stride, kernel / 2, nn::Padding::Reflect, false, name + ".conv"),
      cbn_(out_ch, num_classes, name + ".cbn") {}

Tensor GenBlock::forward(const Tensor& x, const std::vector<int>& labels, Mode mode) {
  return act_.forward(cbn_.forward(conv_.forward(x), labels, mode));
}

Tensor GenBlock::backward(const Tensor& dy) { return conv_.backward(cbn_.backward(act_.backward(dy))); }

void GenBlock::params(ParamList& out) {
  conv_.params(out);
  cbn_.params(out);
}

ConditionalGenerator::ConditionalGenerator(const GeneratorConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const int k = cfg.num_classes, w0 = cfg.widths[0];
  enc0_ = GenBlock(cfg.noise_channels, w0, 3, 1, k, "enc0");
  enc1_ = GenBlock(w0, w0, 3, 2, k, "enc1");
  dec0_ = GenBlock(2 * w0, w0, 3, 1, k, "dec0");
  for (int l = 1; l <= cfg.up_levels(); ++l)
    ups_.emplace_back(cfg.widths[l - 1], cfg.widths[l], 3, 1, k, "up" + std::to_string(l));
  out_conv_ = nn::Conv2d(cfg.widths.back(), cfg.out_channels, 3, 1, 1, nn::Padding::Reflect, true, "out.conv");
  Rng rng(cfg.seed);
  enc0_.init(rng);
  enc1_.init(rng);
  dec0_.init(rng);
  for (auto& u : ups_) u.init(rng);
  out_conv_.init(rng);
}

Tensor ConditionalGenerator::forward(const Tensor& z, const std::vector<int>& labels, Mode mode) {
  require(z.rank() == 4 && z.dim(1) == cfg_.noise_channels && z.dim(2) == cfg_.noise_size &&
              z.dim(3) == cfg_.noise_size,
          "noise shape " + shape_str(z.shape()) + " does not match generator config");
  const Tensor e0 = enc0_.forward(z, labels, mode);
  const Tensor e1 = enc1_.forward(e0, labels, mode);
  enc1_shape_ = e1.shape();
  const Tensor up = nn::upsample_bilinear2x(e1);
  skip_shapes_.assign(1, {e0.shape(), up.shape()});
  Tensor h = dec0_.forward(nn::concat_channels(up, e0), labels, mode);
  up_in_shapes_.clear();
  for (auto& blk : ups_) {
    up_in_shapes_.push_back(h.shape());
    h = blk.forward(nn::upsample_bilinear2x(h), labels, mode);
  }
  Tensor t = tanh_.forward(out_conv_.forward(h));
  for (auto& v : t.vec()) v = 0.5f * (v + 1.0f);
  return t;
}

Tensor ConditionalGenerator::backward(const Tensor& dimages) {
  Tensor d = dimages;
  d *= 0.5f;
  d = out_conv_.backward(tanh_.backward(d));
  for (int l = static_cast<int>(ups_.size()) - 1; l >= 0; --l)
    d = nn::upsample_bilinear2x_backward(ups_[l].backward(d), up_in_shapes_[l]);
  Tensor dup, de0;
  nn::split_channels(dec0_.backward(d), enc1_shape_[1], dup, de0);
  de0 += enc1_.backward(nn::upsample_bilinear2x_backward(dup, enc1_shape_));
  return enc0_.backward(de0);
}

ParamList ConditionalGenerator::params() {
  ParamList out;
  enc0_.params(out);
  enc1_.params(out);
  dec0_.params(out);
  for (auto& u : ups_) u.params(out);
  out_conv_.params(out);
  return out;
}

std::vector<Tensor*> ConditionalGenerator::buffers() {
  std::vector<Tensor*> out;
  enc0_.buffers(out);
  enc1_.buffers(out);
  dec0_.buffers(out);
  for (auto& u : ups_) u.buffers(out);
  return out;
}

std::uint64_t ConditionalGenerator::checksum() {
  std::uint64_t h = 1469598103934665603ULL;
  for (Param* p : params()) h = checksum_bytes(p->value.data(), p->value.size() * sizeof(float), h);
  for (Tensor* t : buffers()) h = checksum_bytes(t->data(), t->size() * sizeof(float), h);
  return h;
}

NoiseLabelSampler::NoiseLabelSampler(std::vector<int> classes, std::uint64_t seed)
    : classes_(std::move(classes)), rng_(seed) {
  require(!classes_.empty(), "label sampler needs at least one class");
}

void NoiseLabelSampler::draw(int batch, const GeneratorConfig& cfg, Tensor& z, std::vector<int>& labels) {
  for (int c : classes_)
    require(c >= 0 && c < cfg.num_classes, "sampler class " + std::to_string(c) + " outside generator classes");
  z = Tensor({batch, cfg.noise_channels, cfg.noise_size, cfg.noise_size});
  nn::fill_normal(z, 1.0f, rng_);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes_.size()) - 1);
  labels.resize(static_cast<std::size_t>(batch));
  for (auto& y : labels) y = classes_[static_cast<std::size_t>(pick(rng_))];
}

Samples sample(ConditionalGenerator& g, int batch_size, NoiseLabelSampler& sampler) {
  require(batch_size >= 1, "sample batch must be non-empty");
  Tensor z;
  Samples s;
  sampler.draw(batch_size, g.config(), z, s.labels);
  s.images = g.forward(z, s.labels, Mode::BatchStats);
  return s;
}

// ------------------------------------------------------- GeneratorTrainer

namespace {
std::vector<int> all_indices(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[i] = i;
  return v;
}
}  // namespace

GeneratorTrainer::GeneratorTrainer(ConditionalGenerator& g, model::Classifier& teacher, Options opt,
                                   std::uint64_t seed)
    : g_(g),
      teacher_(teacher),
      opt_(opt),
      stats_(model::capture_bn_statistics(teacher)),
      sampler_(all_indices(g.config().num_classes), seed),
      adam_(g.params(), opt.lr, opt.beta1) {
  require(g.config().num_classes == teacher.head.num_classes(),
          "generator classes must match the teacher's class count");
  require(g.config().image_size == teacher.config().image_size, "generator output size differs from teacher input");
  require(teacher.frozen(), "generator training needs a frozen teacher");
}

GeneratorLosses GeneratorTrainer::run(const Samples& s, bool update) {
  auto out = teacher_.forward(s.images, Mode::Eval);
  GeneratorLosses l;
  const auto ce = loss::generator_ce_loss(out.logits.cast<double>(), s.labels);
  l.ce = ce.value;
  auto bns_layers = teacher_.features.bn_layers();
  std::vector<TensorD> acts;
  acts.reserve(bns_layers.size());
  for (auto* bn : bns_layers) acts.push_back(bn->last_input().cast<double>());
  const auto bns = loss::bns_loss_from_activations(stats_, acts);
  l.bns = bns.value;
  if (!update) return l;

  if (opt_.use_bns)
    for (std::size_t i = 0; i < bns_layers.size(); ++i) bns_layers[i]->inject_input_grad(bns.grads[i].cast<float>());
  Tensor dlogits = ce.grad.cast<float>();
  if (!opt_.use_ce) dlogits.zero();
  const Tensor dx = teacher_.backward(dlogits, {}, {}, true);
  nn::zero_grad(g_.params());
  g_.backward(dx);
  adam_.step();
  ++steps_;
  return l;
}

GeneratorLosses GeneratorTrainer::step() {
  Tensor z;
  Samples s;
  sampler_.draw(opt_.batch_size, g_.config(), z, s.labels);
  s.images = g_.forward(z, s.labels, Mode::Train);
  return run(s, true);
}

GeneratorLosses GeneratorTrainer::evaluate(int batch_size) {
  Samples s = sample(g_, batch_size, sampler_);
  return run(s, false);
}

double label_agreement(ConditionalGenerator& g, model::Classifier& teacher, int n, std::uint64_t seed) {
  NoiseLabelSampler sampler(all_indices(g.config().num_classes), seed);
  int hit = 0, total = 0;
  while (total < n) {
    const int b = std::min(128, std::max(2, n - total));
    auto s = sample(g, b, sampler);
    const Tensor logits = teacher.forward(s.images, Mode::Eval).logits;
    for (int i = 0; i < b && total < n; ++i, ++total) {
      int best = 0;
      for (int k = 1; k < logits.dim(1); ++k)
        if (logits.at(i, k) > logits.at(i, best)) best = k;
      hit += best == s.labels[i];
    }
  }
  return static_cast<double>(hit) / n;
}

void save_generator(const std::filesystem::path& path, ConditionalGenerator& g) {
  std::vector<const Tensor*> arrays;
  json names = json::array();
  for (Param* p : g.params()) {
    arrays.push_back(&p->value);
    names.push_back(p->name);
  }
  for (Tensor* t : g.buffers()) arrays.push_back(t);
  io::write_tensors(path, json{{"kind", "generator"}, {"config", g.config()}, {"params", names}}, arrays);
}

ConditionalGenerator load_generator(const std::filesystem::path& path) {
  auto file = io::read_tensors(path);
  require(file.meta.value("kind", "") == "generator", path.string() + " is not a generator checkpoint");
  ConditionalGenerator g(file.meta.at("config").get<GeneratorConfig>());
  auto ps = g.params();
  auto bufs = g.buffers();
  require(file.arrays.size() == ps.size() + bufs.size(), "generator checkpoint does not match architecture");
  std::size_t k = 0;
  for (Param* p : ps) {
    require(file.arrays[k].shape() == p->value.shape(), "generator checkpoint shape mismatch for " + p->name);
    p->value = std::move(file.arrays[k++]);
  }
  for (Tensor* t : bufs) *t = std::move(file.arrays[k++]);
  return g;
}

namespace {

// 3x5 bitmap digits, rows top to bottom, 3 bits per row.
constexpr unsigned char kDigits[10][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
};

void draw_label(Tensor& grid, int top, int size, int value) {
  const std::string text = std::to_string(value);
  const int cell = std::max(1, size / (4 * static_cast<int>(text.size()) + 1));
  const int width = grid.dim(2);
  const std::size_t plane = static_cast<std::size_t>(grid.dim(1)) * width;
  int x0 = cell;
  for (char ch : text) {
    const auto& glyph = kDigits[ch - '0'];
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c) {
        if (!((glyph[r] >> (2 - c)) & 1)) continue;
        for (int dy = 0; dy < cell; ++dy)
          for (int dx = 0; dx < cell; ++dx) {
            const int y = top + (size - 5 * cell) / 2 + r * cell + dy, x = x0 + c * cell + dx;
            if (y < top + size && x < size)
              for (int ch3 = 0; ch3 < 3; ++ch3) grid[ch3 * plane + static_cast<std::size_t>(y) * width + x] = 1.0f;
          }
      }
    x0 += 4 * cell;
  }
}

}  // namespace

Tensor sample_grid(ConditionalGenerator& g, const std::vector<int>& class_ids, int per_class, std::uint64_t seed) {
  require(per_class >= 1, "per_class must be at least 1");
  require(static_cast<int>(class_ids.size()) == g.config().num_classes, "one class id per generator class required");
  const int s = g.config().image_size, rows = g.config().num_classes;
  const int cols = per_class + 1;
  Tensor grid({3, rows * s, cols * s});
  const std::size_t plane = static_cast<std::size_t>(rows) * s * cols * s;
  NoiseLabelSampler sampler({0}, seed);
  Rng rng(seed);
  for (int r = 0; r < rows; ++r) {
    draw_label(grid, r * s, s, class_ids[r]);
    Tensor z({std::max(per_class, 2), g.config().noise_channels, g.config().noise_size, g.config().noise_size});
    nn::fill_normal(z, 1.0f, rng);
    std::vector<int> labels(static_cast<std::size_t>(z.dim(0)), r);
    const Tensor imgs = g.forward(z, labels, Mode::BatchStats);
    for (int k = 0; k < per_class; ++k)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x)
            grid[c * plane + static_cast<std::size_t>(r * s + y) * cols * s + (k + 1) * s + x] =
                imgs.at(k, c % imgs.dim(1), y, x);
  }
  return grid;
}

}  // namespace dtcil::gen
