// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dtcil/nn/layers.hpp"

namespace dtcil::nn {

/// Momentum SGD with Nesterov lookahead and L2 weight decay.
class NesterovSgd {
 public:
  NesterovSgd(ParamList params, double lr, double momentum = 0.9, double weight_decay = 5e-4);
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  ParamList params_;
  std::vector<Tensor> velocity_;
  double lr_, momentum_, weight_decay_;
};

/// Adam with bias correction; beta1 is the "momentum" setting.
class Adam {
 public:
  Adam(ParamList params, double lr = 1e-3, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8);
  void step();
  long steps() const { return t_; }

 private:
  ParamList params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Piecewise-constant learning rate: multiplied by `factor` at each milestone epoch.
struct MultiStepSchedule {
  double base_lr = 0.1;
  std::vector<int> milestones;
  double factor = 0.1;

  double lr_at(int epoch) const;
};

}  // namespace dtcil::nn
