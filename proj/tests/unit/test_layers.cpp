// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "dtcil/nn/layers.hpp"
#include "dtcil/nn/optim.hpp"
#include "gradcheck.hpp"

using namespace dtcil;
using namespace dtcil::nn;
using testutil::dot;
using testutil::fd_rel_error;
using testutil::randn;

namespace {

// Float networks: central differences with a coarse step, so a loose tolerance.
constexpr double kTol = 2e-2;

}  // namespace

TEST_CASE("conv2d gradients, zero and reflect padding, strided") {
  std::mt19937_64 rng(3);
  for (auto mode : {Padding::Zeros, Padding::Reflect})
    for (int stride : {1, 2})
      for (int k : {1, 3}) {
        Conv2d conv(3, 4, k, stride, k / 2, mode, true, "c");
        conv.init(rng);
        fill_normal(conv.bias.value, 0.1f, rng);
        Tensor x = randn({2, 3, 6, 6}, rng);
        Tensor y = conv.forward(x);
        Tensor r = randn(y.shape(), rng);
        conv.weight.zero_grad();
        conv.bias.zero_grad();
        Tensor dx = conv.backward(r);
        auto f = [&] { return dot(r, conv.forward(x)); };
        CHECK(fd_rel_error(x, dx, f, 1e-2) < kTol);
        CHECK(fd_rel_error(conv.weight.value, conv.weight.grad, f, 1e-2) < kTol);
        CHECK(fd_rel_error(conv.bias.value, conv.bias.grad, f, 1e-2) < kTol);
      }
}

TEST_CASE("conv2d output shape") {
  Conv2d conv(3, 5, 3, 2, 1, Padding::Zeros, false, "c");
  std::mt19937_64 rng(1);
  conv.init(rng);
  Tensor y = conv.forward(Tensor({2, 3, 8, 8}));
  CHECK(y.shape() == Shape{2, 5, 4, 4});
}

TEST_CASE("batchnorm gradients in train and eval mode") {
  std::mt19937_64 rng(5);
  for (Mode mode : {Mode::Train, Mode::BatchStats, Mode::Eval}) {
    BatchNorm2d bn(3, true, "bn");
    fill_normal(bn.gamma.value, 0.5f, rng);
    fill_normal(bn.beta.value, 0.5f, rng);
    bn.running_mean = randn({3}, rng);
    for (auto& v : bn.running_var.vec()) v = 0.5f + std::abs(v);
    Tensor x = randn({4, 3, 3, 3}, rng, 2.0f);
    Tensor y = bn.forward(x, mode);
    Tensor r = randn(y.shape(), rng);
    bn.gamma.zero_grad();
    bn.beta.zero_grad();
    Tensor dx = bn.backward(r);
    auto f = [&] { return dot(r, bn.forward(x, mode)); };
    CHECK(fd_rel_error(x, dx, f, 1e-2) < kTol);
    CHECK(fd_rel_error(bn.gamma.value, bn.gamma.grad, f, 1e-2) < kTol);
    CHECK(fd_rel_error(bn.beta.value, bn.beta.grad, f, 1e-2) < kTol);
  }
}

TEST_CASE("batchnorm running statistics follow momentum and unbiased variance") {
  BatchNorm2d bn(1, false, "bn");
  Tensor x({4, 1, 1, 1}, std::vector<float>{1, 2, 3, 4});
  bn.forward(x, Mode::Train);
  CHECK(bn.running_mean[0] == doctest::Approx(0.1 * 2.5));
  // unbiased variance of {1,2,3,4} is 5/3
  CHECK(bn.running_var[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
  bn.forward(x, Mode::BatchStats);
  CHECK(bn.running_mean[0] == doctest::Approx(0.1 * 2.5));
}

TEST_CASE("batchnorm injected input gradient is added once") {
  std::mt19937_64 rng(2);
  BatchNorm2d bn(2, true, "bn");
  Tensor x = randn({3, 2, 2, 2}, rng);
  bn.forward(x, Mode::Eval);
  Tensor r = randn(x.shape(), rng);
  Tensor base = bn.backward(r);
  bn.forward(x, Mode::Eval);
  Tensor extra = randn(x.shape(), rng);
  bn.inject_input_grad(extra);
  Tensor with = bn.backward(r);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(with[i] == doctest::Approx(base[i] + extra[i]).epsilon(1e-5));
  bn.forward(x, Mode::Eval);
  Tensor again = bn.backward(r);
  CHECK(again == base);
}

TEST_CASE("conditional batchnorm gradients and row selection") {
  std::mt19937_64 rng(9);
  ConditionalBatchNorm2d cbn(3, 4, "cbn");
  fill_normal(cbn.gamma.value, 1.0f, rng);
  fill_normal(cbn.beta.value, 1.0f, rng);
  Tensor x = randn({4, 3, 2, 2}, rng);
  std::vector<int> labels{0, 2, 2, 3};
  Tensor y = cbn.forward(x, labels, Mode::Train);
  Tensor r = randn(y.shape(), rng);
  cbn.gamma.zero_grad();
  cbn.beta.zero_grad();
  Tensor dx = cbn.backward(r);
  auto f = [&] { return dot(r, cbn.forward(x, labels, Mode::Train)); };
  CHECK(fd_rel_error(x, dx, f, 1e-2) < kTol);
  CHECK(fd_rel_error(cbn.gamma.value, cbn.gamma.grad, f, 1e-2) < kTol);
  CHECK(fd_rel_error(cbn.beta.value, cbn.beta.grad, f, 1e-2) < kTol);
  // class 1 never appears, so its rows get no gradient
  for (int c = 0; c < 3; ++c) {
    CHECK(cbn.gamma.grad.at(1, c) == 0.0f);
    CHECK(cbn.beta.grad.at(1, c) == 0.0f);
  }
}

TEST_CASE("activation, pooling, upsampling and channel concat gradients") {
  std::mt19937_64 rng(4);
  Tensor x = randn({2, 3, 4, 4}, rng);
  {
    LeakyReLU a(0.2f);
    Tensor r = randn(x.shape(), rng);
    a.forward(x);
    Tensor dx = a.backward(r);
    CHECK(fd_rel_error(x, dx, [&] { return dot(r, a.forward(x)); }, 1e-3) < kTol);
  }
  {
    Tanh a;
    Tensor r = randn(x.shape(), rng);
    a.forward(x);
    Tensor dx = a.backward(r);
    CHECK(fd_rel_error(x, dx, [&] { return dot(r, a.forward(x)); }, 1e-3) < kTol);
  }
  {
    Tensor r = randn({2, 3}, rng);
    Tensor dx = global_avg_pool_backward(r, x.shape());
    CHECK(fd_rel_error(x, dx, [&] { return dot(r, global_avg_pool(x)); }, 1e-2) < kTol);
  }
  {
    Tensor r = randn({2, 3, 8, 8}, rng);
    Tensor dx = upsample_bilinear2x_backward(r, x.shape());
    CHECK(fd_rel_error(x, dx, [&] { return dot(r, upsample_bilinear2x(x)); }, 1e-2) < kTol);
  }
  {
    Tensor b = randn({2, 2, 4, 4}, rng);
    Tensor c = concat_channels(x, b);
    CHECK(c.shape() == Shape{2, 5, 4, 4});
    Tensor da, db;
    split_channels(c, 3, da, db);
    CHECK(da == x);
    CHECK(db == b);
  }
}

TEST_CASE("upsampling preserves constants") {
  Tensor x({1, 1, 3, 3}, 0.7f);
  Tensor y = upsample_bilinear2x(x);
  CHECK(y.shape() == Shape{1, 1, 6, 6});
  for (float v : y.vec()) CHECK(v == doctest::Approx(0.7f));
}

TEST_CASE("gradient clipping caps the global norm") {
  Param a("a", Tensor({3})), b("b", Tensor({2}));
  a.grad = Tensor({3}, std::vector<float>{3, 0, 0});
  b.grad = Tensor({2}, std::vector<float>{0, 4});
  ParamList ps{&a, &b};
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(grad_norm(ps) == doctest::Approx(1.0));
  CHECK(a.grad[0] == doctest::Approx(0.6));
  // below the cap nothing changes
  CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(1.0));
  CHECK(b.grad[1] == doctest::Approx(0.8));
}

TEST_CASE("nesterov update and frozen prefix") {
  Param w("w", Tensor({2}, std::vector<float>{1, 1}));
  w.frozen_prefix = 1;
  NesterovSgd opt({&w}, 0.1, 0.9, 0.0);
  w.grad = Tensor({2}, std::vector<float>{1, 1});
  opt.step();
  CHECK(w.value[0] == 1.0f);
  // v = 1, step = lr * (g + mu v) = 0.1 * 1.9
  CHECK(w.value[1] == doctest::Approx(1.0 - 0.19));
}

TEST_CASE("multistep schedule") {
  MultiStepSchedule s{0.1, {10, 15}, 0.1};
  CHECK(s.lr_at(0) == doctest::Approx(0.1));
  CHECK(s.lr_at(10) == doctest::Approx(0.01));
  CHECK(s.lr_at(16) == doctest::Approx(0.001));
}
