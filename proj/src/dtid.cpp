// SPDX-License-Identifier: Apache-2.0

#include "dtcil/dtid.hpp"

#include <cmath>

#include "dtcil/io.hpp"

namespace dtcil::dtid {

TapSelection select_taps(const model::BackboneConfig& cfg) {
  require(cfg.num_stages() >= 2, "tap selection needs at least two residual stage groups");
  TapSelection t;
  for (int s = 1; s < cfg.num_stages(); ++s) t.stage_ids.push_back(s);
  return t;
}

std::vector<Tensor> select_maps(const std::vector<Tensor>& stage_maps, const TapSelection& taps) {
  std::vector<Tensor> out;
  for (int s : taps.stage_ids) {
    require(s >= 0 && s < static_cast<int>(stage_maps.size()), "invalid tap id " + std::to_string(s));
    out.push_back(stage_maps[s]);
  }
  return out;
}

std::vector<Tensor> collect_maps(model::Classifier& teacher, const TapSelection& taps, const Tensor& images) {
  for (int s : taps.stage_ids)
    require(s >= 0 && s < teacher.config().num_stages(), "invalid tap id " + std::to_string(s));
  auto f = teacher.features.forward(images, Mode::Eval);
  return select_maps(f.stage_maps, taps);
}

VariationalAdapter::VariationalAdapter(int in_ch, int out_ch, nn::Rng& rng, const std::string& name)
    : c1_(in_ch, 2 * in_ch, 1, 1, 0, nn::Padding::Zeros, false, name + ".conv1"),
      c2_(2 * in_ch, 2 * in_ch, 1, 1, 0, nn::Padding::Zeros, false, name + ".conv2"),
      c3_(2 * in_ch, out_ch, 1, 1, 0, nn::Padding::Zeros, true, name + ".conv3"),
      b1_(2 * in_ch, true, name + ".bn1"),
      b2_(2 * in_ch, true, name + ".bn2") {
  c1_.init(rng);
  c2_.init(rng);
  c3_.init(rng);
}

Tensor VariationalAdapter::forward(const Tensor& s, Mode mode) {
  Tensor h = r1_.forward(b1_.forward(c1_.forward(s), mode));
  h = r2_.forward(b2_.forward(c2_.forward(h), mode));
  return c3_.forward(h);
}

Tensor VariationalAdapter::backward(const Tensor& dy) {
  Tensor d = c3_.backward(dy);
  d = c2_.backward(b2_.backward(r2_.backward(d)));
  return c1_.backward(b1_.backward(r1_.backward(d)));
}

void VariationalAdapter::params(ParamList& out) {
  c1_.params(out);
  b1_.params(out);
  c2_.params(out);
  b2_.params(out);
  c3_.params(out);
}

void VariationalAdapter::buffers(std::vector<Tensor*>& out) {
  b1_.buffers(out);
  b2_.buffers(out);
}

DTIDState::DTIDState(TapSelection taps, std::vector<int> teacher_channels, int n_teachers, std::uint64_t seed,
                     std::vector<int> student_channels)
    : taps_(std::move(taps)), n_teachers_(n_teachers) {
  require(n_teachers >= 1 && n_teachers <= 2, "DT-ID supports one or two teachers");
  require(static_cast<int>(teacher_channels.size()) == taps_.size(), "one channel count per tap required");
  if (student_channels.empty()) student_channels = teacher_channels;
  require(student_channels.size() == teacher_channels.size(), "student channel counts must match tap count");
  nn::Rng rng(seed);
  adapters_.resize(static_cast<std::size_t>(n_teachers));
  for (int n = 0; n < n_teachers; ++n)
    for (int k = 0; k < taps_.size(); ++k)
      adapters_[n].emplace_back(student_channels[k], teacher_channels[k], rng,
                                "mu" + std::to_string(n) + ".tap" + std::to_string(k));
  for (int k = 0; k < taps_.size(); ++k)
    log_var_.emplace_back("omega.tap" + std::to_string(k), Tensor({teacher_channels[k]}, 0.0f));
}

DTIDState init_dtid_state(const TapSelection& taps, const std::vector<int>& teacher_channels, int n_teachers,
                          std::uint64_t seed) {
  return DTIDState(taps, teacher_channels, n_teachers, seed);
}

DTIDState::Step DTIDState::loss_and_backward(const std::vector<std::vector<Tensor>>& teacher_maps,
                                             const std::vector<Tensor>& student_maps, Mode mode) {
  require(static_cast<int>(teacher_maps.size()) == n_teachers_, "DT-ID: expected maps from " +
                                                                    std::to_string(n_teachers_) + " teacher(s)");
  require(static_cast<int>(student_maps.size()) == taps_.size(), "DT-ID: student map count differs from taps");
  std::vector<std::vector<TensorD>> tm(static_cast<std::size_t>(n_teachers_)), mu(tm.size());
  for (int n = 0; n < n_teachers_; ++n) {
    require(static_cast<int>(teacher_maps[n].size()) == taps_.size(), "DT-ID: missing teacher map for a tap");
    for (int k = 0; k < taps_.size(); ++k) {
      tm[n].push_back(teacher_maps[n][k].cast<double>());
      mu[n].push_back(adapters_[n][k].forward(student_maps[k], mode).cast<double>());
    }
  }
  std::vector<std::vector<double>> omega;
  for (const auto& p : log_var_) omega.emplace_back(p.value.vec().begin(), p.value.vec().end());
  const auto r = loss::dtid_loss(tm, mu, omega);

  Step out;
  out.value = r.value;
  for (int k = 0; k < taps_.size(); ++k) {
    for (int c = 0; c < log_var_[k].value.dim(0); ++c)
      log_var_[k].grad[c] += static_cast<float>(r.d_log_var[k][c]);
    Tensor ds(student_maps[k].shape());
    for (int n = 0; n < n_teachers_; ++n) ds += adapters_[n][k].backward(r.d_adapter[n][k].cast<float>());
    out.d_student.push_back(std::move(ds));
  }
  return out;
}

ParamList DTIDState::params() {
  ParamList out;
  for (auto& per_teacher : adapters_)
    for (auto& a : per_teacher) a.params(out);
  for (auto& p : log_var_) out.push_back(&p);
  return out;
}

std::vector<Tensor*> DTIDState::buffers() {
  std::vector<Tensor*> out;
  for (auto& per_teacher : adapters_)
    for (auto& a : per_teacher) a.buffers(out);
  return out;
}

double DTIDState::sigma2(int tap, int channel) const { return std::exp(static_cast<double>(log_var_.at(tap).value[channel])); }

void DTIDState::save(const std::filesystem::path& path) {
  std::vector<const Tensor*> arrays;
  nlohmann::json names = nlohmann::json::array();
  for (Param* p : params()) {
    arrays.push_back(&p->value);
    names.push_back(p->name);
  }
  for (Tensor* t : buffers()) arrays.push_back(t);
  io::write_tensors(path,
                    nlohmann::json{{"kind", "dtid"},
                                   {"taps", taps_.stage_ids},
                                   {"n_teachers", n_teachers_},
                                   {"params", names}},
                    arrays);
}

}  // namespace dtcil::dtid
