// SPDX-License-Identifier: Apache-2.0
//
// Scalar training objectives with analytic gradients. Everything here runs in
// double precision on copies of network activations.

#pragma once

#include <optional>
#include <ostream>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcil/backbone.hpp"
#include "dtcil/tensor.hpp"

namespace dtcil::loss {

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kVarFloor = 1e-5;

/// Loss value together with its gradient w.r.t. the primary input.
struct Result {
  double value = 0;
  TensorD grad;
};

/// Row-wise softmax of [N, C] logits.
TensorD softmax(const TensorD& logits);

/// Mean over the batch of -log p(label), from probability rows.
double ce_loss(const TensorD& probs, const std::vector<int>& labels);
/// Same objective from logits, with d/d(logits).
Result ce_loss_logits(const TensorD& logits, const std::vector<int>& labels);

/// -mean_n cos(old_n, new_n); gradient w.r.t. `new_features`.
Result lf_loss(const TensorD& old_features, const TensorD& new_features, double eps = 1e-12);

/// Cross-entropy between the label fed to the generator and the teacher's softmax on the generated sample.
/// `fed_labels` are indices into the teacher's class list.
Result generator_ce_loss(const TensorD& teacher_logits, const std::vector<int>& fed_labels);

/// KL( N(est_mean, est_var) || N(ref_mean, ref_var) ).
double gaussian_kl(double est_mean, double est_var, double ref_mean, double ref_var);

/// Per-channel batch mean and biased variance (floored) of a [N, C, H, W] activation.
struct ChannelStats {
  std::vector<double> mean, var;
};
ChannelStats batch_channel_stats(const TensorD& activation, double var_floor = kVarFloor);

/// Sum over layers and channels of gaussian_kl(observed, stored).
double bns_loss(const model::BNStatistics& stored, const std::vector<ChannelStats>& observed);
/// Same loss from the raw BN-layer inputs, with gradients w.r.t. each input.
struct BnsResult {
  double value = 0;
  std::vector<TensorD> grads;
};
BnsResult bns_loss_from_activations(const model::BNStatistics& stored, const std::vector<TensorD>& activations,
                                    double var_floor = kVarFloor);

/// J for one sample: sum_{c,h,w} (t - mu)^2 / (2 sigma_c^2) + log sigma_c, sigma_c^2 = exp(omega_c).
struct PenaltyResult {
  double value = 0;
  TensorD d_adapter;  // same shape as the adapter output
  std::vector<double> d_log_var;
};
PenaltyResult dtid_penalty(const TensorD& teacher_map, const TensorD& adapter_output,
                           const std::vector<double>& log_variances);

/// Batch DT-ID objective from precomputed adapter outputs.
/// Index [n][k]: teacher n in {0,1}, tap k; maps are [N, C, H, W]. Omega is shared by both teachers per tap.
struct DtidResult {
  double value = 0;
  std::vector<std::vector<TensorD>> d_adapter;  // [teacher][tap]
  std::vector<std::vector<double>> d_log_var;   // [tap][channel]
};
DtidResult dtid_loss(const std::vector<std::vector<TensorD>>& teacher_maps,
                     const std::vector<std::vector<TensorD>>& adapter_outputs,
                     const std::vector<std::vector<double>>& log_variances);

/// Mean cross-entropy H(softmax(teacher), softmax(student)); gradient w.r.t. student logits.
Result dfkd_loss(const TensorD& teacher_logits, const TensorD& student_logits);

/// alpha_i = alpha_0 * sqrt(n_old / n_new), alpha_0 doubled when no exemplars are kept.
double alpha_schedule(double alpha0, int n_old_classes, int n_new_classes, bool has_exemplars);

struct LossReport {
  std::optional<double> ce, lf, dtid, dfkd, dfkd_new, gen_ce, gen_bns;
  double alpha = 0;
  double weighted_total = 0;
};

/// dtid + ce + alpha * lf + dfkd (+ dfkd_new); absent terms contribute nothing.
double total_objective(const LossReport& parts, double alpha);

nlohmann::json to_json_line(long step, const LossReport& r);
void write_report_line(std::ostream& os, long step, const LossReport& r);

}  // namespace dtcil::loss
