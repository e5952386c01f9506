// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference helpers shared by the unit tests.

#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "dtcil/tensor.hpp"

namespace testutil {

using dtcil::Tensor;
using dtcil::TensorD;

inline Tensor randn(dtcil::Shape s, std::mt19937_64& rng, float sd = 1.0f) {
  Tensor t(std::move(s));
  std::normal_distribution<float> d(0.0f, sd);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

inline TensorD randn_d(dtcil::Shape s, std::mt19937_64& rng, double sd = 1.0) {
  TensorD t(std::move(s));
  std::normal_distribution<double> d(0.0, sd);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

/// sum_i r_i * y_i accumulated in double.
inline double dot(const Tensor& r, const Tensor& y) {
  double s = 0;
  for (std::size_t i = 0; i < r.size(); ++i) s += static_cast<double>(r[i]) * y[i];
  return s;
}

/// Relative error between analytic and central-difference gradients over all coordinates of `x`.
/// `f` re-evaluates the scalar objective at the current contents of `x`.
template <typename T>
double fd_rel_error(dtcil::BasicTensor<T>& x, const dtcil::BasicTensor<T>& analytic, const std::function<double()>& f,
                    double eps, std::size_t max_coords = 64) {
  double num = 0, den_a = 0, den_n = 0;
  const std::size_t step = std::max<std::size_t>(1, x.size() / max_coords);
  for (std::size_t i = 0; i < x.size(); i += step) {
    const T orig = x[i];
    x[i] = static_cast<T>(orig + eps);
    const double fp = f();
    x[i] = static_cast<T>(orig - eps);
    const double fm = f();
    x[i] = orig;
    const double n = (fp - fm) / (2 * eps);
    const double a = analytic[i];
    num += (a - n) * (a - n);
    den_a += a * a;
    den_n += n * n;
  }
  const double den = std::max(std::sqrt(std::max(den_a, den_n)), 1e-12);
  return std::sqrt(num) / den;
}

/// Fraction of sampled coordinates whose analytic and central-difference derivatives agree within
/// `tol` relative to max(|a|, |n|, scale_floor). Robust to the occasional rectifier kink that a
/// finite step straddles, which matters for deep float networks.
template <typename T>
double fd_agreement(dtcil::BasicTensor<T>& x, const dtcil::BasicTensor<T>& analytic, const std::function<double()>& f,
                    double eps, double tol, std::size_t max_coords = 64) {
  double amax = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) amax = std::max(amax, std::abs(static_cast<double>(analytic[i])));
  const double floor = 1e-2 * amax + 1e-6;
  const std::size_t step = std::max<std::size_t>(1, x.size() / max_coords);
  int ok = 0, total = 0;
  for (std::size_t i = 0; i < x.size(); i += step) {
    const T orig = x[i];
    const double a = analytic[i];
    bool agree = false;
    // Alternative step sizes rescue coordinates where one step straddled a kink.
    for (double h : {eps, eps / 3, eps * 3}) {
      x[i] = static_cast<T>(orig + h);
      const double fp = f();
      x[i] = static_cast<T>(orig - h);
      const double fm = f();
      x[i] = orig;
      const double n = (fp - fm) / (2 * h);
      agree = agree || std::abs(a - n) <= tol * std::max({std::abs(a), std::abs(n), floor});
    }
    ok += agree;
    ++total;
  }
  return static_cast<double>(ok) / total;
}

}  // namespace testutil
