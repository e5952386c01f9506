// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one [PASS]/[FAIL] line per criterion and exits nonzero if
// any criterion fails. Pass criterion numbers as arguments to run a subset.
//
// Every reference value below comes from an oracle written here, independently of the
// library code it checks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dtcil/experiment.hpp"
#include "dtcil/io.hpp"
#include "dtcil/losses.hpp"
#include "dtcil/metrics.hpp"
#include "dtcil/protocol.hpp"
#include "dtcil/trainer.hpp"

using namespace dtcil;
namespace fs = std::filesystem;

namespace {

using Rng = std::mt19937_64;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << "first failure: ";
      else detail << "; ";
      detail << what;
      pass = false;
    }
  }
};

double uniform(Rng& rng, double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }
int uniform_int(Rng& rng, int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); }

TensorD random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  TensorD t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

// ---------------------------------------------------------------- oracles

// KL(N(m1, v1) || N(m2, v2)) written from the log-ratio of densities.
double kl_oracle(double m1, double v1, double m2, double v2) {
  return 0.5 * (std::log(v2 / v1) + v1 / v2 + (m1 - m2) * (m1 - m2) / v2 - 1.0);
}

double penalty_oracle(const TensorD& t, const TensorD& mu, const std::vector<double>& omega) {
  double s = 0;
  for (int c = 0; c < t.dim(0); ++c) {
    const double sigma = std::sqrt(std::exp(omega[c]));
    for (int h = 0; h < t.dim(1); ++h)
      for (int w = 0; w < t.dim(2); ++w) {
        const std::size_t k = (static_cast<std::size_t>(c) * t.dim(1) + h) * t.dim(2) + w;
        const double r = t[k] - mu[k];
        s += r * r / (2 * sigma * sigma) + std::log(sigma);
      }
  }
  return s;
}

double log_sum_exp(const TensorD& m, int row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < m.dim(1); ++k) mx = std::max(mx, m.at(row, k));
  double s = 0;
  for (int k = 0; k < m.dim(1); ++k) s += std::exp(m.at(row, k) - mx);
  return mx + std::log(s);
}

double ce_logits_oracle(const TensorD& logits, const std::vector<int>& labels) {
  double s = 0;
  for (int n = 0; n < logits.dim(0); ++n) s += log_sum_exp(logits, n) - logits.at(n, labels[n]);
  return s / logits.dim(0);
}

double ce_probs_oracle(const TensorD& probs, const std::vector<int>& labels) {
  double s = 0;
  for (int n = 0; n < probs.dim(0); ++n) s -= std::log(std::max(probs.at(n, labels[n]), 1e-12));
  return s / probs.dim(0);
}

double lf_oracle(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (int n = 0; n < a.dim(0); ++n) {
    double dot = 0, na = 0, nb = 0;
    for (int k = 0; k < a.dim(1); ++k) {
      dot += a.at(n, k) * b.at(n, k);
      na += a.at(n, k) * a.at(n, k);
      nb += b.at(n, k) * b.at(n, k);
    }
    s += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return -s / a.dim(0);
}

double dfkd_oracle(const TensorD& teacher, const TensorD& student) {
  double s = 0;
  for (int n = 0; n < teacher.dim(0); ++n) {
    const double lt = log_sum_exp(teacher, n), ls = log_sum_exp(student, n);
    for (int k = 0; k < teacher.dim(1); ++k) s -= std::exp(teacher.at(n, k) - lt) * (student.at(n, k) - ls);
  }
  return s / teacher.dim(0);
}

double alpha_oracle(double a0, int n_old, int n_new, bool exemplars) {
  return (exemplars ? a0 : 2 * a0) * std::sqrt(static_cast<double>(n_old) / n_new);
}

// Relative error of an analytic gradient against central differences of f over every entry of x.
double fd_rel_error(std::vector<double*> x, const std::vector<double>& analytic, const std::function<double()>& f,
                    double eps = 1e-5) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = *x[i];
    *x[i] = keep + eps;
    const double up = f();
    *x[i] = keep - eps;
    const double down = f();
    *x[i] = keep;
    const double num = (up - down) / (2 * eps);
    diff += (num - analytic[i]) * (num - analytic[i]);
    na += analytic[i] * analytic[i];
    nn += num * num;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

std::vector<double*> pointers(TensorD& t) {
  std::vector<double*> p;
  for (auto& v : t.vec()) p.push_back(&v);
  return p;
}

std::vector<double> values(const TensorD& t) { return {t.vec().begin(), t.vec().end()}; }

// ---------------------------------------------------------------- C1

Verdict loss_oracles() {
  Verdict v;
  Rng rng(11);
  const int kTrials = 200;
  const double tol = 1e-6;
  double worst = 0;
  auto near = [&](double got, double want, const std::string& what) {
    worst = std::max(worst, std::abs(got - want));
    v.check(std::abs(got - want) <= tol, what + ": got " + std::to_string(got) + " want " + std::to_string(want));
  };

  for (int t = 0; t < kTrials; ++t) {
    const double m1 = uniform(rng, -3, 3), v1 = uniform(rng, 0.05, 5), m2 = uniform(rng, -3, 3),
                 v2 = uniform(rng, 0.05, 5);
    near(loss::gaussian_kl(m1, v1, m2, v2), kl_oracle(m1, v1, m2, v2), "gaussian_kl");
  }
  near(loss::gaussian_kl(1, 4, 0, 1), 1.306853, "gaussian_kl example");

  for (int t = 0; t < kTrials; ++t) {
    const int c = uniform_int(rng, 1, 4), h = uniform_int(rng, 1, 3), w = uniform_int(rng, 1, 3);
    const TensorD tm = random_tensor(rng, {c, h, w}), mu = random_tensor(rng, {c, h, w});
    std::vector<double> omega(c);
    for (auto& o : omega) o = uniform(rng, -1.5, 1.5);
    near(loss::dtid_penalty(tm, mu, omega).value, penalty_oracle(tm, mu, omega), "dtid_penalty");
  }
  near(loss::dtid_penalty(TensorD({1, 1, 1}, {2.0}), TensorD({1, 1, 1}, {1.0}), {0.0}).value, 0.5,
       "dtid_penalty example");
  near(loss::dtid_penalty(TensorD({1, 1, 1}, {1.0}), TensorD({1, 1, 1}, {0.0}), {2.0}).value,
       1.0 / (2 * std::exp(2.0)) + 1.0, "dtid_penalty example");

  // Batch DT-ID on 4x3x3 maps: mean over samples of the sum over taps and both teachers.
  for (int t = 0; t < kTrials; ++t) {
    const int n = uniform_int(rng, 1, 3);
    std::vector<std::vector<TensorD>> teach(2), adapt(2);
    std::vector<std::vector<double>> omega(2, std::vector<double>(4));
    for (auto& row : omega)
      for (auto& o : row) o = uniform(rng, -1, 1);
    for (int k = 0; k < 2; ++k)
      for (int tn = 0; tn < 2; ++tn) {
        teach[tn].push_back(random_tensor(rng, {n, 4, 3, 3}));
        adapt[tn].push_back(random_tensor(rng, {n, 4, 3, 3}));
      }
    double want = 0;
    for (int s = 0; s < n; ++s)
      for (int k = 0; k < 2; ++k)
        for (int tn = 0; tn < 2; ++tn)
          want += penalty_oracle(teach[tn][k].slice0(s, s + 1).reshaped({4, 3, 3}),
                                 adapt[tn][k].slice0(s, s + 1).reshaped({4, 3, 3}), omega[k]);
    near(loss::dtid_loss(teach, adapt, omega).value, want / n, "dtid_loss");
  }

  for (int t = 0; t < kTrials; ++t) {
    const int n = uniform_int(rng, 1, 6), c = uniform_int(rng, 2, 7);
    const TensorD logits = random_tensor(rng, {n, c}, 2.0);
    std::vector<int> labels(n);
    for (auto& y : labels) y = uniform_int(rng, 0, c - 1);
    near(loss::ce_loss_logits(logits, labels).value, ce_logits_oracle(logits, labels), "ce_loss (logits)");
    near(loss::ce_loss(loss::softmax(logits), labels), ce_probs_oracle(loss::softmax(logits), labels),
         "ce_loss (probabilities)");
  }

  for (int t = 0; t < kTrials; ++t) {
    const int n = uniform_int(rng, 1, 6), d = uniform_int(rng, 2, 9);
    const TensorD a = random_tensor(rng, {n, d}), b = random_tensor(rng, {n, d});
    const double lf = loss::lf_loss(a, b).value;
    near(lf, lf_oracle(a, b), "lf_loss");
    v.check(lf >= -1 - 1e-12 && lf <= 1 + 1e-12, "lf_loss outside [-1, 1]");
  }

  for (int t = 0; t < kTrials; ++t) {
    const int n = uniform_int(rng, 1, 6), c = uniform_int(rng, 2, 7);
    const TensorD tl = random_tensor(rng, {n, c}, 2.0), sl = random_tensor(rng, {n, c}, 2.0);
    near(loss::dfkd_loss(tl, sl).value, dfkd_oracle(tl, sl), "dfkd_loss");
  }
  near(loss::dfkd_loss(TensorD({1, 4}), TensorD({1, 4})).value, std::log(4.0), "dfkd_loss uniform example");

  for (int t = 0; t < kTrials; ++t) {
    const double a0 = uniform(rng, 0.1, 20);
    const int n_old = uniform_int(rng, 1, 100), n_new = uniform_int(rng, 1, 50);
    const bool ex = uniform_int(rng, 0, 1) == 1;
    near(loss::alpha_schedule(a0, n_old, n_new, ex), alpha_oracle(a0, n_old, n_new, ex), "alpha_schedule");
  }
  // These two examples are printed to four decimals, so they are compared at that precision.
  v.check(std::abs(loss::alpha_schedule(5, 50, 10, true) - 11.1803) < 5e-5, "alpha example 11.1803");
  v.check(std::abs(loss::alpha_schedule(5, 50, 10, false) - 22.3607) < 5e-5, "alpha example 22.3607");
  near(loss::alpha_schedule(5, 7, 7, true), 5, "alpha with equal class counts");

  loss::LossReport parts;
  parts.dtid = 1;
  parts.ce = 2;
  parts.lf = -0.5;
  near(loss::total_objective(parts, 4), 1, "total_objective example");
  parts.dfkd = 0.5;
  near(loss::total_objective(parts, 4), 1.5, "total_objective example with dfkd");

  v.detail << (v.pass ? "" : "; ") << kTrials << " random inputs per loss, worst abs err " << worst;
  return v;
}

// ---------------------------------------------------------------- C2

Verdict gradient_checks() {
  Verdict v;
  Rng rng(23);
  const int kInstances = 20;
  const double tol = 1e-4;
  double worst = 0;
  auto record = [&](double err, const std::string& what) {
    worst = std::max(worst, err);
    v.check(err <= tol, what + " rel err " + std::to_string(err));
  };

  for (int t = 0; t < kInstances; ++t) {
    // Two BN layers with random stored statistics; activations stand in for generator output.
    model::BNStatistics stored;
    std::vector<TensorD> acts;
    for (int l = 0; l < 2; ++l) {
      const int c = uniform_int(rng, 1, 3);
      model::BnRecord r;
      r.layer_id = "bn" + std::to_string(l);
      r.channels = c;
      for (int k = 0; k < c; ++k) {
        r.means.push_back(uniform(rng, -1, 1));
        r.variances.push_back(uniform(rng, 0.3, 2));
      }
      stored.records.push_back(r);
      acts.push_back(random_tensor(rng, {uniform_int(rng, 2, 4), c, 2, 2}));
    }
    const auto res = loss::bns_loss_from_activations(stored, acts);
    std::vector<double*> x;
    std::vector<double> g;
    for (std::size_t l = 0; l < acts.size(); ++l) {
      auto p = pointers(acts[l]);
      x.insert(x.end(), p.begin(), p.end());
      auto gv = values(res.grads[l]);
      g.insert(g.end(), gv.begin(), gv.end());
    }
    record(fd_rel_error(x, g, [&] { return loss::bns_loss_from_activations(stored, acts).value; }), "bns_loss");
  }

  for (int t = 0; t < kInstances; ++t) {
    const int c = uniform_int(rng, 1, 4), h = uniform_int(rng, 1, 3), w = uniform_int(rng, 1, 3);
    const TensorD tm = random_tensor(rng, {c, h, w});
    TensorD mu = random_tensor(rng, {c, h, w});
    TensorD omega = random_tensor(rng, {c}, 0.5);
    auto omega_vec = [&] { return values(omega); };
    const auto res = loss::dtid_penalty(tm, mu, omega_vec());
    auto f = [&] { return loss::dtid_penalty(tm, mu, omega_vec()).value; };
    record(fd_rel_error(pointers(mu), values(res.d_adapter), f), "dtid_penalty d/d(adapter output)");
    record(fd_rel_error(pointers(omega), res.d_log_var, f), "dtid_penalty d/d(omega)");
  }

  for (int t = 0; t < kInstances; ++t) {
    const int n = uniform_int(rng, 1, 5), d = uniform_int(rng, 2, 8);
    const TensorD a = random_tensor(rng, {n, d});
    TensorD b = random_tensor(rng, {n, d});
    const auto res = loss::lf_loss(a, b);
    record(fd_rel_error(pointers(b), values(res.grad), [&] { return loss::lf_loss(a, b).value; }), "lf_loss");
  }

  for (int t = 0; t < kInstances; ++t) {
    const int n = uniform_int(rng, 1, 5), c = uniform_int(rng, 2, 6);
    const TensorD tl = random_tensor(rng, {n, c}, 1.5);
    TensorD sl = random_tensor(rng, {n, c}, 1.5);
    const auto res = loss::dfkd_loss(tl, sl);
    record(fd_rel_error(pointers(sl), values(res.grad), [&] { return loss::dfkd_loss(tl, sl).value; }), "dfkd_loss");
  }

  v.detail << (v.pass ? "" : "; ") << kInstances << " instances per gradient, worst rel err " << worst;
  return v;
}

// ---------------------------------------------------------------- C3

Verdict batch_composition() {
  Verdict v;
  int rows = 0;
  for (int b : {4, 128, 256}) {
    using C = protocol::BatchComposition;
    const std::vector<std::tuple<bool, int, C>> table = {
        {true, 0, C{b / 2, 0, b / 2, 0}},  {true, 1, C{b / 2, 0, b / 4, b / 4}},
        {true, 2, C{b / 4, b / 4, b / 4, b / 4}}, {false, 0, C{b, 0, 0, 0}},
        {false, 1, C{b / 2, 0, 0, b / 2}}, {false, 2, C{b / 4, b / 4, 0, b / 2}},
    };
    for (const auto& [ex, ng, want] : table) {
      const C got = protocol::compose_batch(ex, ng, b);
      v.check(got == want, "B=" + std::to_string(b) + " exemplars=" + std::to_string(ex) + " N_g=" + std::to_string(ng));
      ++rows;
    }
  }
  v.check(protocol::compose_batch(true, 1, 256) == protocol::BatchComposition{128, 0, 64, 64}, "(256, N_R>0, N_g=1)");
  v.detail << (v.pass ? "" : "; ") << rows << " table rows checked";
  return v;
}

// ---------------------------------------------------------------- C4

double forgetting_oracle(const metrics::AccuracyLedger& l, int i) {
  double sum = 0;
  int count = 0;
  for (const auto& [c, a_i] : l.row(i)) {
    const int o = l.origin(c);
    if (o >= i) continue;
    double best = -1;
    for (int j = o; j < i; ++j) best = std::max(best, l.at(j, c));
    sum += best - a_i;
    ++count;
  }
  return sum / count;
}

Verdict metric_oracles() {
  Verdict v;
  Rng rng(31);
  int checked = 0;
  for (int t = 0; t < 200; ++t) {
    const int steps = uniform_int(rng, 2, 6);
    std::map<int, int> origin;
    int next = 0;
    for (int s = 0; s < steps; ++s)
      for (int k = uniform_int(rng, 1, 4); k > 0; --k) origin[next++] = s;
    metrics::AccuracyLedger l(origin);
    for (int s = 0; s < steps; ++s) {
      std::map<int, double> row;
      for (const auto& [c, o] : origin)
        if (o <= s) row[c] = uniform_int(rng, 0, 50) / 50.0;
      l.record(s, row);
    }
    for (int i = 1; i < steps; ++i) {
      const double got = metrics::average_forgetting(l, i), want = forgetting_oracle(l, i);
      v.check(got == want, "ledger " + std::to_string(t) + " time " + std::to_string(i));
      ++checked;
    }
  }
  metrics::AccuracyLedger hand(std::map<int, int>{{0, 0}});
  hand.record(0, {{0, 0.8}});
  hand.record(1, {{0, 0.6}});
  hand.record(2, {{0, 0.7}});
  const double f = metrics::average_forgetting(hand, 2);
  v.check(std::abs(f - 0.1) < 1e-12, "hand example gives " + std::to_string(f));
  v.detail << (v.pass ? "" : "; ") << "200 ledgers, " << checked << " exact comparisons, hand example F=" << f;
  return v;
}

// ---------------------------------------------------------------- C5

Verdict structural_invariants() {
  Verdict v;
  ToyDatasetConfig dc;
  dc.image_size = 16;
  dc.train_per_class = 16;
  dc.test_per_class = 4;
  const Dataset data = make_toy_dataset(dc);
  std::vector<int> ids(10);
  std::iota(ids.begin(), ids.end(), 0);
  auto timeline = protocol::build_timeline(ids, 5, 5, 3);
  timeline.attach_splits(data);
  model::BackboneConfig arch;
  arch.image_size = 16;
  arch.stage_widths = {8, 16, 32};
  arch.input_mean = data.channel_mean;
  arch.input_std = data.channel_std;
  gen::GeneratorConfig ga;
  ga.image_size = 16;
  ga.noise_size = 4;
  ga.noise_channels = 8;
  ga.widths = {16, 8, 4};

  train::PhaseConfig cfg;
  cfg.batch_size = 16;
  cfg.epochs = 1;
  cfg.batches_per_epoch = 2;
  cfg.gen_warmup_steps = 2;
  cfg.gen_batch_size = 8;
  cfg.seed = 4;
  auto f0 = train::train_base(data, timeline.task(0), arch, cfg);
  auto h1 = train::train_second_teacher(data, timeline.task(1), arch, cfg);
  auto g = train::warm_up_generator(f0, ga, cfg);

  train::PhaseConfig c = cfg;
  c.time_index = 1;
  c.n_teachers = 2;
  c.n_generators = 1;
  protocol::ExemplarStore store(0);
  const auto f0_sum = f0.checksum(), h1_sum = h1.checksum();
  train::IncrementTrainer tr(data, timeline, store, f0, &h1, &g, nullptr, c);

  const auto* dtid = tr.dtid_state();
  v.check(dtid != nullptr, "no DT-ID state with two teachers");
  if (dtid)
    for (int k = 0; k < static_cast<int>(dtid->taps().size()); ++k)
      for (float w : dtid->log_variance(k).value.vec()) v.check(w == 0.0f, "omega not initialized to 0");
  const Tensor old_rows = tr.student().head.weight.value.slice0(0, tr.n_old());

  double max_post = 0, min_sigma2 = 1e300;
  for (int step = 0; step < 2; ++step) {
    const auto batch = tr.next_batch();
    const auto p = tr.train_step(batch);
    int real = 0;
    for (auto s : batch.slots) real += !train::is_synthetic(s);
    v.check(p.ce_rows == real, "CE computed on synthetic rows");
    v.check(p.ce_grad_on_synthetic == 0.0, "CE gradient reached synthetic rows");
    v.check(p.post_clip_norm <= c.clip_norm + 1e-6, "post-clip norm " + std::to_string(p.post_clip_norm));
    v.check(p.min_sigma2 > 0.0, "sigma^2 not positive");
    max_post = std::max(max_post, p.post_clip_norm);
    min_sigma2 = std::min(min_sigma2, p.min_sigma2);
  }
  // A batch of synthetic rows only carries no CE term at all.
  {
    auto batch = tr.next_batch();
    train::MixedBatch syn;
    std::vector<const Tensor*> parts;
    std::vector<Tensor> rows;
    for (int r = 0; r < batch.size(); ++r)
      if (train::is_synthetic(batch.slots[r])) {
        rows.push_back(batch.images.slice0(r, r + 1));
        syn.targets.push_back(batch.targets[r]);
        syn.slots.push_back(batch.slots[r]);
      }
    for (const auto& r : rows) parts.push_back(&r);
    syn.images = concat0(parts);
    const auto p = tr.train_step(syn);
    v.check(!p.report.ce.has_value() && p.ce_rows == 0, "CE present on a synthetic-only batch");
    v.check(p.report.lf.has_value() && p.report.dtid.has_value(), "LF or DT-ID missing on synthetic rows");
  }
  v.check(tr.student().head.weight.value.slice0(0, tr.n_old()) == old_rows, "old head rows changed");
  v.check(f0.checksum() == f0_sum, "previous model changed");
  v.check(h1.checksum() == h1_sum, "new-class teacher changed");

  // Conditional BN with one class is plain affine BN.
  {
    Rng rng(5);
    nn::ConditionalBatchNorm2d cbn(3, 1, "cbn");
    nn::BatchNorm2d bn(3, true, "bn");
    std::normal_distribution<float> d(0, 1);
    for (int ch = 0; ch < 3; ++ch) {
      cbn.gamma.value.at(0, ch) = bn.gamma.value[ch] = 1 + d(rng);
      cbn.beta.value.at(0, ch) = bn.beta.value[ch] = d(rng);
    }
    Tensor x({4, 3, 3, 3});
    for (auto& e : x.vec()) e = 2 * d(rng) + 0.5f;
    double diff = 0;
    for (auto mode : {nn::Mode::Train, nn::Mode::Eval}) {
      const Tensor a = cbn.forward(x, std::vector<int>(4, 0), mode), b = bn.forward(x, mode);
      for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, static_cast<double>(std::abs(a[i] - b[i])));
    }
    v.check(diff <= 1e-6, "conditional BN differs from BN by " + std::to_string(diff));
  }
  v.detail << (v.pass ? "" : "; ") << "max post-clip norm " << max_post << ", min sigma^2 " << min_sigma2;
  return v;
}

// ---------------------------------------------------------------- C6

Verdict checkpoint_round_trip() {
  Verdict v;
  const fs::path dir = fs::temp_directory_path() / "dtcil_acceptance_ckpt";
  fs::create_directories(dir);
  Rng rng(41);
  std::normal_distribution<float> d(0, 1);

  model::BackboneConfig arch;
  arch.image_size = 16;
  arch.stage_widths = {8, 16, 32};
  model::Classifier m(arch, {3, 1, 4, 0}, 9);
  // Perturb BN statistics so they are not at their defaults.
  for (Tensor* b : m.buffers())
    for (auto& e : b->vec()) e = 0.5f + std::abs(d(rng));
  m.set_frozen(true);
  model::save_classifier(dir / "model.bin", m);
  auto m2 = model::load_classifier(dir / "model.bin");

  gen::GeneratorConfig gc;
  gc.num_classes = 4;
  gc.image_size = 16;
  gc.noise_channels = 8;
  gc.widths = {16, 8, 4};
  gen::ConditionalGenerator g(gc);
  for (Tensor* b : g.buffers())
    for (auto& e : b->vec()) e = 0.5f + std::abs(d(rng));
  gen::save_generator(dir / "gen.bin", g);
  auto g2 = gen::load_generator(dir / "gen.bin");

  int mismatched = 0;
  for (int t = 0; t < 100; ++t) {
    Tensor x({1, 3, 16, 16});
    for (auto& e : x.vec()) e = d(rng);
    mismatched += !(m.forward(x, nn::Mode::Eval).logits == m2.forward(x, nn::Mode::Eval).logits);

    Tensor z({2, gc.noise_channels, gc.noise_size, gc.noise_size});
    for (auto& e : z.vec()) e = d(rng);
    const std::vector<int> labels = {uniform_int(rng, 0, 3), uniform_int(rng, 0, 3)};
    for (auto mode : {nn::Mode::Eval, nn::Mode::BatchStats})
      mismatched += !(g.forward(z, labels, mode) == g2.forward(z, labels, mode));
  }
  v.check(mismatched == 0, std::to_string(mismatched) + " outputs differ after reload");
  v.check(m.checksum() == m2.checksum() && g.checksum() == g2.checksum(), "checksums differ after reload");
  fs::remove_all(dir);
  v.detail << (v.pass ? "" : "; ") << "100 inputs, classifier logits and generator outputs bit-identical";
  return v;
}

// ---------------------------------------------------------------- C7

Verdict dfgr_smoke() {
  Verdict v;
  const int kSteps = 2000, kGenBatch = 64;
  for (std::uint64_t seed : {1, 2, 3}) {
    ToyDatasetConfig dc;
    dc.num_classes = 5;
    dc.image_size = 16;
    dc.train_per_class = 200;
    dc.test_per_class = 50;
    dc.seed = seed;
    const Dataset data = make_toy_dataset(dc);
    auto tl = protocol::build_timeline({0, 1, 2, 3, 4}, 5, 5, seed);
    tl.attach_splits(data);
    model::BackboneConfig arch;
    arch.image_size = 16;
    arch.stage_widths = {16, 32, 64};
    arch.input_mean = data.channel_mean;
    arch.input_std = data.channel_std;
    train::PhaseConfig pc;
    pc.seed = seed;
    pc.batch_size = 64;
    pc.epochs = 20;
    pc.batches_per_epoch = 10;
    auto teacher = train::train_base(data, tl.task(0), arch, pc);
    double train_acc = 0;
    for (const auto& [c, a] : metrics::per_class_accuracy(teacher, data, "train", {0, 1, 2, 3, 4})) train_acc += a / 5;
    v.check(train_acc >= 0.9, "seed " + std::to_string(seed) + " teacher train accuracy " + std::to_string(train_acc));

    struct Arm {
      double agreement, bns_init, bns_final;
    };
    auto run_arm = [&](bool use_bns) {
      gen::GeneratorConfig gc;
      gc.num_classes = 5;
      gc.image_size = 16;
      gc.noise_size = 4;
      gc.noise_channels = 64;
      gc.widths = {32, 16, 8};
      gc.seed = seed;
      gen::ConditionalGenerator g(gc);
      gen::GeneratorTrainer::Options o;
      o.batch_size = kGenBatch;
      o.use_bns = use_bns;
      gen::GeneratorTrainer tr(g, teacher, o, seed * 7 + 1);
      // BNS is measured on fresh batches, averaged to damp batch noise.
      auto bns_now = [&] {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += tr.evaluate(kGenBatch).bns / 4;
        return s;
      };
      Arm a{};
      a.bns_init = bns_now();
      for (int s = 0; s < kSteps; ++s) tr.step();
      a.bns_final = bns_now();
      a.agreement = gen::label_agreement(g, teacher, 1000, seed * 1000 + 99);
      return a;
    };
    const Arm full = run_arm(true), ce_only = run_arm(false);
    const std::string tag = "seed " + std::to_string(seed) + ": ";
    v.check(full.agreement >= 0.6, tag + "CE+BNS agreement " + std::to_string(full.agreement));
    v.check(full.bns_final <= 0.2 * full.bns_init,
            tag + "BNS " + std::to_string(full.bns_init) + " -> " + std::to_string(full.bns_final));
    v.check(ce_only.agreement < full.agreement || ce_only.bns_final >= 5 * full.bns_final,
            tag + "CE-only ablation not worse");
    char line[256];
    std::snprintf(line, sizeof line,
                  "[seed %llu teacher %.3f | CE+BNS agree %.3f bns %.3g->%.3g | CE-only agree %.3f bns %.3g] ",
                  static_cast<unsigned long long>(seed), train_acc, full.agreement, full.bns_init, full.bns_final,
                  ce_only.agreement, ce_only.bns_final);
    v.detail << (v.pass ? "" : "; ") << line;
  }
  return v;
}

// ---------------------------------------------------------------- C8

Verdict cil_comparison() {
  Verdict v;
  const fs::path cfg_dir = fs::path(DTCIL_SOURCE_DIR) / "configs";
  const fs::path out = fs::path(DTCIL_BINARY_DIR) / "acceptance_runs";
  fs::remove_all(out);  // never reuse phases trained by an older build

  struct Arm {
    std::string name;
    double acc = 0, forget = 0;
  };
  std::vector<Arm> arms;
  for (const char* name : {"desk_baseline", "desk_full"}) {
    auto cfg = exp::load_config(cfg_dir / (std::string(name) + ".json"));
    cfg.output_dir = out / name;
    cfg.validate();
    v.check(cfg.dataset.num_classes == 10 && cfg.timeline.base_classes == 5 && cfg.timeline.increment == 5 &&
                cfg.n_reserved == 0 && cfg.seeds.size() == 3,
            std::string(name) + " is not the 10-class 5+5 N_R=0 three-seed setting");
    exp::run_experiment(cfg);
    Arm a{name};
    for (auto seed : cfg.seeds) {
      const auto rows =
          metrics::parse_results_csv(io::read_text(exp::seed_dir(cfg.output_dir, seed) / "results.csv"));
      a.acc += rows.back().avg_accuracy / cfg.seeds.size();
      a.forget += rows.back().avg_forgetting / cfg.seeds.size();
    }
    arms.push_back(a);
  }
  const Arm &base = arms[0], &full = arms[1];
  v.check(full.acc >= base.acc + 0.02, "accuracy gain " + std::to_string(100 * (full.acc - base.acc)) + " pp");
  v.check(full.forget < base.forget, "forgetting not lower");
  char line[200];
  std::snprintf(line, sizeof line, "baseline (1,0) acc %.4f forget %.4f | full (2,1) acc %.4f forget %.4f", base.acc,
                base.forget, full.acc, full.forget);
  v.detail << (v.pass ? "" : "; ") << line;
  return v;
}

struct Criterion {
  int id;
  const char* name;
  Verdict (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "loss oracles", loss_oracles},
      {2, "gradient checks", gradient_checks},
      {3, "batch composition", batch_composition},
      {4, "metric oracles", metric_oracles},
      {5, "structural invariants", structural_invariants},
      {6, "checkpoint round trip", checkpoint_round_trip},
      {7, "generator smoke", dfgr_smoke},
      {8, "incremental comparison", cil_comparison},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] C%d %s: %s (%.1fs)\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.str().c_str(), secs);
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
