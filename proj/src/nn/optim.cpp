// SPDX-License-Identifier: Apache-2.0

#include "dtcil/nn/optim.hpp"

#include <cmath>

namespace dtcil::nn {

NesterovSgd::NesterovSgd(ParamList params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  for (const Param* p : params_) velocity_.emplace_back(p->value.shape());
}

void NesterovSgd::step() {
  const auto mu = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_), lr = static_cast<float>(lr_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    if (!p.trainable) continue;
    Tensor& v = velocity_[k];
    for (std::size_t i = p.frozen_prefix; i < p.value.size(); ++i) {
      const float g = p.grad[i] + wd * p.value[i];
      v[i] = mu * v[i] + g;
      p.value[i] -= lr * (g + mu * v[i]);
    }
  }
}

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Param* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const auto step = static_cast<float>(lr_ / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(eps_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    if (!p.trainable) continue;
    for (std::size_t i = p.frozen_prefix; i < p.value.size(); ++i) {
      const float g = p.grad[i];
      m_[k][i] = b1 * m_[k][i] + (1 - b1) * g;
      v_[k][i] = b2 * v_[k][i] + (1 - b2) * g * g;
      p.value[i] -= step * m_[k][i] / (std::sqrt(v_[k][i] * inv_c2) + eps);
    }
  }
}

double MultiStepSchedule::lr_at(int epoch) const {
  double lr = base_lr;
  for (int m : milestones)
    if (epoch >= m) lr *= factor;
  return lr;
}

}  // namespace dtcil::nn
