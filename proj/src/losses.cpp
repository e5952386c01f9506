// SPDX-License-Identifier: Apache-2.0

#include "dtcil/losses.hpp"

#include <algorithm>
#include <cmath>

namespace dtcil::loss {

namespace {

void check_2d(const TensorD& t, const char* what) {
  require(t.rank() == 2, std::string(what) + " must be a [N, C] matrix");
}

double norm_row(const TensorD& t, int r) {
  double s = 0;
  for (int i = 0; i < t.dim(1); ++i) s += t.at(r, i) * t.at(r, i);
  return std::sqrt(s);
}

}  // namespace

TensorD softmax(const TensorD& logits) {
  check_2d(logits, "logits");
  TensorD p(logits.shape());
  const int n = logits.dim(0), c = logits.dim(1);
  for (int b = 0; b < n; ++b) {
    double mx = logits.at(b, 0);
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits.at(b, k));
    double z = 0;
    for (int k = 0; k < c; ++k) z += (p.at(b, k) = std::exp(logits.at(b, k) - mx));
    for (int k = 0; k < c; ++k) p.at(b, k) /= z;
  }
  return p;
}

double ce_loss(const TensorD& probs, const std::vector<int>& labels) {
  check_2d(probs, "predictions");
  require(static_cast<int>(labels.size()) == probs.dim(0), "one label per prediction required");
  require(!labels.empty(), "cross-entropy over an empty batch");
  double s = 0;
  for (int b = 0; b < probs.dim(0); ++b) {
    require(labels[b] >= 0 && labels[b] < probs.dim(1), "label index out of range");
    s -= std::log(std::max(probs.at(b, labels[b]), kLogFloor));
  }
  return s / probs.dim(0);
}

Result ce_loss_logits(const TensorD& logits, const std::vector<int>& labels) {
  TensorD p = softmax(logits);
  Result r;
  r.value = ce_loss(p, labels);
  const double inv = 1.0 / logits.dim(0);
  for (int b = 0; b < logits.dim(0); ++b) {
    p.at(b, labels[b]) -= 1.0;
    for (int k = 0; k < logits.dim(1); ++k) p.at(b, k) *= inv;
  }
  r.grad = std::move(p);
  return r;
}

Result lf_loss(const TensorD& old_features, const TensorD& new_features, double eps) {
  check_2d(new_features, "features");
  require(old_features.shape() == new_features.shape(), "old/new feature batches differ in shape");
  const int n = new_features.dim(0), d = new_features.dim(1);
  require(n > 0, "less-forget loss over an empty batch");
  Result r;
  r.grad = TensorD(new_features.shape());
  for (int b = 0; b < n; ++b) {
    const double no = std::max(norm_row(old_features, b), eps);
    const double nn = std::max(norm_row(new_features, b), eps);
    double dot = 0;
    for (int i = 0; i < d; ++i) dot += old_features.at(b, i) * new_features.at(b, i);
    const double cs = dot / (no * nn);
    r.value -= cs;
    for (int i = 0; i < d; ++i)
      r.grad.at(b, i) = -(old_features.at(b, i) / (no * nn) - cs * new_features.at(b, i) / (nn * nn)) / n;
  }
  r.value /= n;
  return r;
}

Result generator_ce_loss(const TensorD& teacher_logits, const std::vector<int>& fed_labels) {
  check_2d(teacher_logits, "teacher logits");
  for (int y : fed_labels)
    require(y >= 0 && y < teacher_logits.dim(1), "fed label " + std::to_string(y) + " outside the teacher's classes");
  return ce_loss_logits(teacher_logits, fed_labels);
}

double gaussian_kl(double est_mean, double est_var, double ref_mean, double ref_var) {
  require(est_var > 0 && ref_var > 0, "gaussian_kl needs strictly positive variances");
  const double dm = est_mean - ref_mean;
  return (dm * dm + est_var) / (2.0 * ref_var) - 0.5 * std::log(est_var / ref_var) - 0.5;
}

ChannelStats batch_channel_stats(const TensorD& a, double var_floor) {
  require(a.rank() == 4, "batch statistics need a [N, C, H, W] activation");
  const int n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  const double m = static_cast<double>(n) * hw;
  ChannelStats st;
  st.mean.assign(c, 0.0);
  st.var.assign(c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (int b = 0; b < n; ++b)
      for (int i = 0; i < hw; ++i) s += a[a.offset(b, ch, 0, 0) + i];
    const double mu = s / m;
    double ss = 0;
    for (int b = 0; b < n; ++b)
      for (int i = 0; i < hw; ++i) {
        const double d = a[a.offset(b, ch, 0, 0) + i] - mu;
        ss += d * d;
      }
    st.mean[ch] = mu;
    st.var[ch] = std::max(ss / m, var_floor);
  }
  return st;
}

double bns_loss(const model::BNStatistics& stored, const std::vector<ChannelStats>& observed) {
  require(stored.records.size() == observed.size(), "BNS loss: " + std::to_string(observed.size()) +
                                                        " observed layers vs " + std::to_string(stored.records.size()) +
                                                        " stored");
  double total = 0;
  for (std::size_t l = 0; l < observed.size(); ++l) {
    const auto& ref = stored.records[l];
    const auto& obs = observed[l];
    require(static_cast<int>(obs.mean.size()) == ref.channels && obs.var.size() == obs.mean.size(),
            "BNS loss: channel count mismatch at layer " + ref.layer_id);
    for (int c = 0; c < ref.channels; ++c) total += gaussian_kl(obs.mean[c], obs.var[c], ref.means[c], ref.variances[c]);
  }
  return total;
}

BnsResult bns_loss_from_activations(const model::BNStatistics& stored, const std::vector<TensorD>& activations,
                                    double var_floor) {
  require(stored.records.size() == activations.size(), "BNS loss: layer count mismatch");
  BnsResult r;
  std::vector<ChannelStats> observed;
  for (const auto& a : activations) observed.push_back(batch_channel_stats(a, var_floor));
  r.value = bns_loss(stored, observed);
  for (std::size_t l = 0; l < activations.size(); ++l) {
    const auto& a = activations[l];
    const auto& ref = stored.records[l];
    const auto& obs = observed[l];
    const int n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
    const double m = static_cast<double>(n) * hw;
    TensorD g(a.shape());
    for (int ch = 0; ch < c; ++ch) {
      const double dmean = (obs.mean[ch] - ref.means[ch]) / ref.variances[ch];
      // The variance floor is active (and flat) when the raw variance fell below it.
      double raw = 0;
      for (int b = 0; b < n; ++b)
        for (int i = 0; i < hw; ++i) {
          const double d = a[a.offset(b, ch, 0, 0) + i] - obs.mean[ch];
          raw += d * d;
        }
      raw /= m;
      const double dvar = raw < var_floor ? 0.0 : 0.5 / ref.variances[ch] - 0.5 / obs.var[ch];
      for (int b = 0; b < n; ++b)
        for (int i = 0; i < hw; ++i) {
          const std::size_t o = a.offset(b, ch, 0, 0) + i;
          g[o] = dmean / m + dvar * 2.0 * (a[o] - obs.mean[ch]) / m;
        }
    }
    r.grads.push_back(std::move(g));
  }
  return r;
}

PenaltyResult dtid_penalty(const TensorD& teacher_map, const TensorD& adapter_output,
                           const std::vector<double>& log_variances) {
  require(teacher_map.shape() == adapter_output.shape(), "DT-ID penalty: teacher map " +
                                                             shape_str(teacher_map.shape()) + " vs adapter output " +
                                                             shape_str(adapter_output.shape()));
  require(teacher_map.rank() == 3, "DT-ID penalty works on one [C, H, W] map");
  const int c = teacher_map.dim(0), hw = teacher_map.dim(1) * teacher_map.dim(2);
  require(static_cast<int>(log_variances.size()) == c, "one log-variance per channel required");
  PenaltyResult r;
  r.d_adapter = TensorD(teacher_map.shape());
  r.d_log_var.assign(c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double inv_var = std::exp(-log_variances[ch]);
    double sq = 0;
    for (int i = 0; i < hw; ++i) {
      const std::size_t o = static_cast<std::size_t>(ch) * hw + i;
      const double res = teacher_map[o] - adapter_output[o];
      sq += res * res;
      r.d_adapter[o] = -res * inv_var;
    }
    // log sigma = omega / 2, counted once per spatial position.
    r.value += 0.5 * sq * inv_var + 0.5 * log_variances[ch] * hw;
    r.d_log_var[ch] = -0.5 * sq * inv_var + 0.5 * hw;
  }
  return r;
}

DtidResult dtid_loss(const std::vector<std::vector<TensorD>>& teacher_maps,
                     const std::vector<std::vector<TensorD>>& adapter_outputs,
                     const std::vector<std::vector<double>>& log_variances) {
  require(!teacher_maps.empty() && teacher_maps.size() == adapter_outputs.size(),
          "DT-ID loss: one adapter set per teacher required");
  const std::size_t taps = log_variances.size();
  DtidResult r;
  r.d_log_var.resize(taps);
  for (std::size_t k = 0; k < taps; ++k) r.d_log_var[k].assign(log_variances[k].size(), 0.0);
  int batch = -1;
  for (std::size_t t = 0; t < teacher_maps.size(); ++t) {
    require(teacher_maps[t].size() == taps, "DT-ID loss: teacher tap count differs from log-variance table");
    require(adapter_outputs[t].size() == taps, "DT-ID loss: missing adapter for a tap layer");
    r.d_adapter.emplace_back();
    for (std::size_t k = 0; k < taps; ++k) {
      const TensorD& tm = teacher_maps[t][k];
      const TensorD& mu = adapter_outputs[t][k];
      require(tm.rank() == 4 && tm.shape() == mu.shape(), "DT-ID loss: map shape mismatch at tap " + std::to_string(k));
      if (batch < 0) batch = tm.dim(0);
      require(tm.dim(0) == batch, "DT-ID loss: batch size differs between maps");
      r.d_adapter[t].emplace_back(mu.shape());
    }
  }
  require(batch > 0, "DT-ID loss over an empty batch");
  const double inv_n = 1.0 / batch;
  for (std::size_t t = 0; t < teacher_maps.size(); ++t) {
    for (std::size_t k = 0; k < taps; ++k) {
      const TensorD& tm = teacher_maps[t][k];
      const TensorD& mu = adapter_outputs[t][k];
      const int c = tm.dim(1), h = tm.dim(2), w = tm.dim(3);
      const std::size_t per = static_cast<std::size_t>(c) * h * w;
      for (int b = 0; b < batch; ++b) {
        TensorD tb({c, h, w}, std::vector<double>(tm.data() + b * per, tm.data() + (b + 1) * per));
        TensorD mb({c, h, w}, std::vector<double>(mu.data() + b * per, mu.data() + (b + 1) * per));
        const auto p = dtid_penalty(tb, mb, log_variances[k]);
        r.value += p.value * inv_n;
        for (std::size_t i = 0; i < per; ++i) r.d_adapter[t][k][b * per + i] = p.d_adapter[i] * inv_n;
        for (int ch = 0; ch < c; ++ch) r.d_log_var[k][ch] += p.d_log_var[ch] * inv_n;
      }
    }
  }
  return r;
}

Result dfkd_loss(const TensorD& teacher_logits, const TensorD& student_logits) {
  check_2d(student_logits, "student logits");
  require(teacher_logits.shape() == student_logits.shape(),
          "DF-KD: teacher covers " + shape_str(teacher_logits.shape()) + " but student " +
              shape_str(student_logits.shape()));
  const int n = student_logits.dim(0), c = student_logits.dim(1);
  require(n > 0, "DF-KD over an empty batch");
  const TensorD pt = softmax(teacher_logits);
  const TensorD ps = softmax(student_logits);
  Result r;
  r.grad = TensorD(student_logits.shape());
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      r.value -= pt.at(b, k) * std::log(std::max(ps.at(b, k), kLogFloor));
      r.grad.at(b, k) = (ps.at(b, k) - pt.at(b, k)) / n;
    }
  r.value /= n;
  return r;
}

double alpha_schedule(double alpha0, int n_old_classes, int n_new_classes, bool has_exemplars) {
  require(alpha0 > 0, "alpha0 must be positive");
  require(n_old_classes >= 1 && n_new_classes >= 1, "class counts must be positive");
  const double a0 = has_exemplars ? alpha0 : 2.0 * alpha0;
  return a0 * std::sqrt(static_cast<double>(n_old_classes) / n_new_classes);
}

double total_objective(const LossReport& p, double alpha) {
  return p.dtid.value_or(0.0) + p.ce.value_or(0.0) + alpha * p.lf.value_or(0.0) + p.dfkd.value_or(0.0) +
         p.dfkd_new.value_or(0.0);
}

nlohmann::json to_json_line(long step, const LossReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return nlohmann::json{{"step", step},         {"ce", opt(r.ce)},           {"lf", opt(r.lf)},
                        {"dtid", opt(r.dtid)},  {"dfkd", opt(r.dfkd)},       {"dfkd_new", opt(r.dfkd_new)},
                        {"gen_ce", opt(r.gen_ce)}, {"gen_bns", opt(r.gen_bns)}, {"alpha", r.alpha},
                        {"total", r.weighted_total}};
}

void write_report_line(std::ostream& os, long step, const LossReport& r) { os << to_json_line(step, r).dump() << '\n'; }

}  // namespace dtcil::loss
