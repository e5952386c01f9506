// SPDX-License-Identifier: Apache-2.0

#include "dtcil/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "dtcil/metrics.hpp"
#include "dtcil/nn/optim.hpp"

namespace dtcil::train {

using nlohmann::json;
using nn::Mode;
using protocol::SampleRef;

std::vector<int> PhaseConfig::effective_milestones() const {
  if (!milestones.empty()) return milestones;
  return {epochs / 2, (3 * epochs) / 4};
}

void PhaseConfig::validate() const {
  require(n_teachers == 1 || n_teachers == 2, "n_teachers must be 1 or 2");
  require(n_generators >= 0 && n_generators <= 2, "n_generators must be 0, 1 or 2");
  require(n_data == -1 || n_data >= 1, "n_data must be -1 (all) or positive");
  require(n_reserved >= 0, "n_reserved must be non-negative");
  require(batch_size >= 4 && batch_size % 4 == 0, "batch_size must be a positive multiple of 4");
  require(epochs >= 0 && batches_per_epoch >= 1, "epochs must be >= 0 and batches_per_epoch >= 1");
  require(lr > 0 && lr_factor > 0 && momentum >= 0 && weight_decay >= 0, "invalid optimizer settings");
  require(alpha0 > 0, "alpha0 must be positive");
  require(clip_norm > 0, "clip_norm must be positive");
  require(gen_warmup_steps >= 0 && gen_batch_size >= 2 && gen_lr > 0, "invalid generator settings");
  if (data_limited) require(n_generators == 2, "data-limited phases use two generators");
}

void to_json(json& j, const PhaseConfig& c) {
  j = json{{"n_teachers", c.n_teachers},
           {"n_generators", c.n_generators},
           {"n_data", c.n_data},
           {"n_reserved", c.n_reserved},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"batches_per_epoch", c.batches_per_epoch},
           {"lr", c.lr},
           {"milestones", c.milestones},
           {"lr_factor", c.lr_factor},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"alpha0", c.alpha0},
           {"clip_norm", c.clip_norm},
           {"gen_warmup_steps", c.gen_warmup_steps},
           {"gen_batch_size", c.gen_batch_size},
           {"gen_lr", c.gen_lr},
           {"gen_beta1", c.gen_beta1},
           {"second_teacher_warm_start", c.second_teacher_warm_start},
           {"data_limited", c.data_limited},
           {"time_index", c.time_index},
           {"seed", c.seed}};
}

void from_json(const json& j, PhaseConfig& c) {
  PhaseConfig d;
  c.n_teachers = j.value("n_teachers", d.n_teachers);
  c.n_generators = j.value("n_generators", d.n_generators);
  c.n_data = j.value("n_data", d.n_data);
  c.n_reserved = j.value("n_reserved", d.n_reserved);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.batches_per_epoch = j.value("batches_per_epoch", d.batches_per_epoch);
  c.lr = j.value("lr", d.lr);
  c.milestones = j.value("milestones", d.milestones);
  c.lr_factor = j.value("lr_factor", d.lr_factor);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.alpha0 = j.value("alpha0", d.alpha0);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.gen_warmup_steps = j.value("gen_warmup_steps", d.gen_warmup_steps);
  c.gen_batch_size = j.value("gen_batch_size", d.gen_batch_size);
  c.gen_lr = j.value("gen_lr", d.gen_lr);
  c.gen_beta1 = j.value("gen_beta1", d.gen_beta1);
  c.second_teacher_warm_start = j.value("second_teacher_warm_start", d.second_teacher_warm_start);
  c.data_limited = j.value("data_limited", d.data_limited);
  c.time_index = j.value("time_index", d.time_index);
  c.seed = j.value("seed", d.seed);
}

namespace {

// Running mean of the terms present in a series of reports.
struct ReportMean {
  std::map<std::string, std::pair<double, long>> sums;
  double alpha = 0;
  double total = 0;
  long n = 0;

  void add(const loss::LossReport& r) {
    auto put = [&](const char* k, const std::optional<double>& v) {
      if (!v) return;
      auto& s = sums[k];
      s.first += *v;
      ++s.second;
    };
    put("ce", r.ce);
    put("lf", r.lf);
    put("dtid", r.dtid);
    put("dfkd", r.dfkd);
    put("dfkd_new", r.dfkd_new);
    put("gen_ce", r.gen_ce);
    put("gen_bns", r.gen_bns);
    alpha = r.alpha;
    total += r.weighted_total;
    ++n;
  }

  loss::LossReport mean() const {
    loss::LossReport r;
    auto get = [&](const char* k) -> std::optional<double> {
      auto it = sums.find(k);
      if (it == sums.end()) return std::nullopt;
      return it->second.first / it->second.second;
    };
    r.ce = get("ce");
    r.lf = get("lf");
    r.dtid = get("dtid");
    r.dfkd = get("dfkd");
    r.dfkd_new = get("dfkd_new");
    r.gen_ce = get("gen_ce");
    r.gen_bns = get("gen_bns");
    r.alpha = alpha;
    r.weighted_total = n ? total / n : 0;
    return r;
  }
};

Tensor gather_images(const Dataset& data, const std::vector<SampleRef>& refs) {
  Tensor out({static_cast<int>(refs.size()), data.channels, data.image_size, data.image_size});
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto& split = data.split(refs[k].split);
    require(refs[k].index >= 0 && refs[k].index < split.size(), "sample reference out of range");
    out.assign0(static_cast<int>(k), split.images.slice0(refs[k].index, refs[k].index + 1));
  }
  return out;
}

int label_of(const Dataset& data, const SampleRef& r) { return data.split(r.split).labels.at(r.index); }

std::set<int> as_set(const std::vector<int>& v) { return {v.begin(), v.end()}; }

}  // namespace

std::vector<SampleRef> training_pool(const Dataset& data, const protocol::TaskSpec& task, int n_per_class,
                                     std::uint64_t seed) {
  require(!task.train_split.empty(), "task " + std::to_string(task.time_index) + " has no training data");
  if (n_per_class < 0) return task.train_split;
  std::vector<SampleRef> out;
  for (int c : task.classes) {
    auto part = protocol::select_exemplars(task.train_split, data, c, n_per_class,
                                           seed * 1000003ULL + static_cast<std::uint64_t>(c));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

SampleRef IncrementTrainer::Cycler::next(nn::Rng& rng) {
  require(!pool.empty(), "no samples available for a batch slot");
  if (at >= order.size()) {
    order.resize(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    at = 0;
  }
  return pool[order[at++]];
}

model::Classifier train_classifier(const Dataset& data, const std::vector<SampleRef>& pool, model::Classifier m,
                                   const PhaseConfig& cfg, const Hooks& hooks) {
  cfg.validate();
  require(!pool.empty(), "cannot train on an empty sample pool");
  m.set_frozen(false);
  if (cfg.epochs == 0) return m;
  auto params = m.params();
  nn::NesterovSgd opt(params, cfg.lr, cfg.momentum, cfg.weight_decay);
  const nn::MultiStepSchedule sched{cfg.lr, cfg.effective_milestones(), cfg.lr_factor};
  nn::Rng rng(cfg.seed * 7919ULL + 17);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t at = order.size();
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(sched.lr_at(epoch));
    ReportMean mean;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      std::vector<SampleRef> refs;
      std::vector<int> targets;
      for (int k = 0; k < cfg.batch_size; ++k) {
        if (at >= order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          at = 0;
        }
        refs.push_back(pool[order[at++]]);
        const int idx = m.head.index_of(label_of(data, refs.back()));
        require(idx >= 0, "training sample of a class outside the head");
        targets.push_back(idx);
      }
      const Tensor x = gather_images(data, refs);
      nn::zero_grad(params);
      auto out = m.forward(x, Mode::Train);
      const auto ce = loss::ce_loss_logits(out.logits.cast<double>(), targets);
      m.backward(ce.grad.cast<float>(), {}, {}, false);
      StepProbe probe;
      probe.step = step++;
      probe.pre_clip_norm = nn::clip_grad_norm(params, cfg.clip_norm);
      probe.post_clip_norm = nn::grad_norm(params);
      opt.step();
      probe.report.ce = ce.value;
      probe.report.weighted_total = ce.value;
      probe.ce_rows = cfg.batch_size;
      mean.add(probe.report);
      if (hooks.on_step) hooks.on_step(probe);
    }
    if (hooks.loss_log) {
      auto line = loss::to_json_line(step, mean.mean());
      line["epoch"] = epoch;
      *hooks.loss_log << line.dump() << '\n';
    }
  }
  return m;
}

model::Classifier train_base(const Dataset& data, const protocol::TaskSpec& task0, const model::BackboneConfig& arch,
                             const PhaseConfig& cfg, const Hooks& hooks) {
  require(!task0.classes.empty(), "base task has no classes");
  model::Classifier init(arch, task0.classes, cfg.seed * 31ULL + 1);
  auto m = train_classifier(data, training_pool(data, task0, -1, cfg.seed), std::move(init), cfg, hooks);
  m.set_frozen(true);
  return m;
}

model::Classifier train_second_teacher(const Dataset& data, const protocol::TaskSpec& task,
                                       const model::BackboneConfig& arch, const PhaseConfig& cfg,
                                       const model::Classifier* warm_start, const Hooks& hooks) {
  require(!task.classes.empty(), "task has no classes");
  model::Classifier init(arch, task.classes, cfg.seed * 31ULL + 2 + static_cast<std::uint64_t>(task.time_index));
  if (warm_start) init.features = warm_start->features;
  auto m = train_classifier(data, training_pool(data, task, cfg.n_data, cfg.seed), std::move(init), cfg, hooks);
  m.set_frozen(true);
  return m;
}

gen::ConditionalGenerator warm_up_generator(model::Classifier& teacher, const gen::GeneratorConfig& arch,
                                            const PhaseConfig& cfg, std::ostream* log) {
  gen::GeneratorConfig gc = arch;
  gc.num_classes = teacher.head.num_classes();
  gc.image_size = teacher.config().image_size;
  gen::ConditionalGenerator g(gc);
  gen::GeneratorTrainer::Options opt;
  opt.batch_size = cfg.gen_batch_size;
  opt.lr = cfg.gen_lr;
  opt.beta1 = cfg.gen_beta1;
  gen::GeneratorTrainer tr(g, teacher, opt, cfg.seed * 101ULL + 5);
  for (int s = 0; s < cfg.gen_warmup_steps; ++s) {
    const auto l = tr.step();
    if (log && (s % 100 == 0 || s + 1 == cfg.gen_warmup_steps)) {
      loss::LossReport r;
      r.gen_ce = l.ce;
      r.gen_bns = l.bns;
      r.weighted_total = l.ce + l.bns;
      *log << loss::to_json_line(s, r).dump() << '\n';
    }
  }
  return g;
}

// ------------------------------------------------------ IncrementTrainer

IncrementTrainer::IncrementTrainer(const Dataset& data, const protocol::TaskTimeline& timeline,
                                   const protocol::ExemplarStore& store, model::Classifier& f_prev,
                                   model::Classifier* h_i, gen::ConditionalGenerator* old_gen,
                                   gen::ConditionalGenerator* new_gen, const PhaseConfig& cfg)
    : data_(data), timeline_(timeline), cfg_(cfg), f_prev_(f_prev), h_i_(h_i), rng_(cfg.seed * 7919ULL + 29) {
  cfg_.validate();
  const int i = cfg_.time_index;
  require(i >= 1 && i < timeline.size(), "incremental phase needs 1 <= time_index < number of tasks");
  const auto& task = timeline.task(i);
  const auto old_classes = timeline.seen_classes(i - 1);
  require(as_set(f_prev.class_ids()) == as_set(old_classes), "previous model must cover exactly the old classes");
  require(f_prev.frozen(), "previous model must be frozen");
  n_old_ = static_cast<int>(old_classes.size());

  if (cfg_.n_teachers == 2) {
    require(h_i != nullptr, "two-teacher training needs the new-class model");
    require(h_i->frozen(), "new-class model must be frozen");
    require(as_set(h_i->class_ids()) == as_set(task.classes), "new-class model must cover exactly the new classes");
  }
  if (cfg_.n_generators >= 1) require(old_gen != nullptr, "replay needs a generator for the old classes");
  if (cfg_.n_generators == 2) {
    require(new_gen != nullptr, "dual replay needs a generator for the new classes");
    require(h_i != nullptr, "dual replay needs the new-class model");
  }
  if (cfg_.data_limited) require(h_i != nullptr && new_gen != nullptr, "data-limited training needs h_i and its generator");

  new_pool_.pool = training_pool(data, task, cfg_.n_data, cfg_.seed);
  if (cfg_.n_reserved > 0) {
    for (int c : old_classes) {
      const auto& refs = store.of(c);
      require(!refs.empty(), "no exemplars stored for old class " + std::to_string(c));
      exemplar_pool_.pool.insert(exemplar_pool_.pool.end(), refs.begin(), refs.end());
    }
  }
  const bool has_exemplars = !exemplar_pool_.pool.empty();
  comp_ = protocol::compose_batch(has_exemplars, cfg_.n_generators, cfg_.batch_size);

  std::map<int, Tensor> by_class;
  for (int c : task.classes) {
    std::vector<SampleRef> refs;
    for (const auto& r : new_pool_.pool)
      if (label_of(data, r) == c) refs.push_back(r);
    by_class.emplace(c, gather_images(data, refs));
  }
  teacher_ext_ = model::extend_classifier(f_prev, model::imprint_weights(f_prev, by_class));
  student_ = teacher_ext_;
  student_.set_frozen(false);
  student_.head.freeze_rows(n_old_);

  alpha_ = loss::alpha_schedule(cfg_.alpha0, n_old_, static_cast<int>(task.classes.size()), has_exemplars);

  if (cfg_.n_teachers == 2) {
    const auto taps = dtid::select_taps(student_.config());
    std::vector<int> channels;
    for (int s : taps.stage_ids) channels.push_back(student_.config().stage_widths[s]);
    dtid_.emplace(taps, channels, 2, cfg_.seed * 131ULL + 3);
  }

  gen::GeneratorTrainer::Options gopt;
  gopt.lr = cfg_.gen_lr;
  gopt.beta1 = cfg_.gen_beta1;
  auto add_gen = [&](gen::ConditionalGenerator* g, model::Classifier& teacher, std::uint64_t salt) {
    const int k = static_cast<int>(gens_.size());
    gopt.batch_size = k == 0 ? (comp_.old_synthetic) : (comp_.new_synthetic);
    gopt.batch_size = std::max(gopt.batch_size, 2);
    gens_.push_back(g);
    gen_trainers_.push_back(std::make_unique<gen::GeneratorTrainer>(*g, teacher, gopt, cfg_.seed * 977ULL + salt));
    std::vector<int> labels(static_cast<std::size_t>(g->config().num_classes));
    std::iota(labels.begin(), labels.end(), 0);
    gen_samplers_.push_back(std::make_unique<gen::NoiseLabelSampler>(labels, cfg_.seed * 983ULL + salt));
    std::vector<int> map;
    for (int id : teacher.class_ids()) map.push_back(student_.head.index_of(id));
    gen_to_student_.push_back(std::move(map));
  };
  if (cfg_.n_generators >= 1) add_gen(old_gen, f_prev, 11);
  if (cfg_.n_generators == 2) add_gen(new_gen, *h_i, 12);
  if (h_i)
    for (int id : h_i->class_ids()) new_columns_.push_back(student_.head.index_of(id));

  auto params = student_.params();
  if (dtid_) {
    auto extra = dtid_->params();
    params.insert(params.end(), extra.begin(), extra.end());
  }
  opt_ = std::make_unique<nn::NesterovSgd>(params, cfg_.lr, cfg_.momentum, cfg_.weight_decay);
}

void IncrementTrainer::append_real(MixedBatch& b, Cycler& c, int count, Slot slot) {
  if (count == 0) return;
  std::vector<SampleRef> refs;
  for (int k = 0; k < count; ++k) {
    refs.push_back(c.next(rng_));
    const int idx = student_.head.index_of(label_of(data_, refs.back()));
    require(idx >= 0, "batch sample of a class outside the student head");
    b.targets.push_back(idx);
    b.slots.push_back(slot);
  }
  b.images.assign0(static_cast<int>(b.slots.size()) - count, gather_images(data_, refs));
  consumed_[slot] += count;
}

void IncrementTrainer::append_synthetic(MixedBatch& b, int which, int count, Slot slot) {
  if (count == 0) return;
  // Interleave contract: one generator update, then fresh samples from the updated generator.
  gen_trainers_[which]->step();
  auto s = gen::sample(*gens_[which], count, *gen_samplers_[which]);
  for (int y : s.labels) {
    b.targets.push_back(gen_to_student_[which][y]);
    b.slots.push_back(slot);
  }
  b.images.assign0(static_cast<int>(b.slots.size()) - count, s.images);
  consumed_[slot] += count;
}

MixedBatch IncrementTrainer::next_batch() {
  MixedBatch b;
  b.images = Tensor({cfg_.batch_size, data_.channels, data_.image_size, data_.image_size});
  append_real(b, new_pool_, comp_.new_original, Slot::NewOriginal);
  if (comp_.new_synthetic > 0) append_synthetic(b, 1, comp_.new_synthetic, Slot::NewSynthetic);
  append_real(b, exemplar_pool_, comp_.old_exemplar, Slot::OldExemplar);
  if (comp_.old_synthetic > 0) append_synthetic(b, 0, comp_.old_synthetic, Slot::OldSynthetic);
  return b;
}

StepProbe IncrementTrainer::train_step(const MixedBatch& batch) {
  const int n = batch.size();
  require(n > 0 && batch.images.dim(0) == n && static_cast<int>(batch.targets.size()) == n,
          "malformed mixed batch");
  const int n_all = student_.head.num_classes();
  StepProbe probe;
  probe.step = steps_++;
  probe.composition = comp_;
  loss::LossReport& rep = probe.report;
  rep.alpha = alpha_;

  auto params = student_.params();
  if (dtid_) {
    auto extra = dtid_->params();
    params.insert(params.end(), extra.begin(), extra.end());
  }
  nn::zero_grad(params);

  auto s = student_.forward(batch.images, Mode::Train);
  auto t = teacher_ext_.forward(batch.images, Mode::Eval);
  const TensorD s_logits = s.logits.cast<double>();
  TensorD dlogits({n, n_all});
  TensorD dfeat({n, s.features.dim(1)});

  std::vector<int> real_rows, old_syn_rows, new_syn_rows;
  for (int r = 0; r < n; ++r) {
    if (!is_synthetic(batch.slots[r]))
      real_rows.push_back(r);
    else if (batch.slots[r] == Slot::OldSynthetic)
      old_syn_rows.push_back(r);
    else
      new_syn_rows.push_back(r);
  }
  auto rows_of = [](const TensorD& m, const std::vector<int>& rows, const std::vector<int>* cols = nullptr) {
    const int c = cols ? static_cast<int>(cols->size()) : m.dim(1);
    TensorD out({static_cast<int>(rows.size()), c});
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (int k = 0; k < c; ++k) out.at(static_cast<int>(a), k) = m.at(rows[a], cols ? (*cols)[k] : k);
    return out;
  };
  auto scatter = [&](const TensorD& g, const std::vector<int>& rows, const std::vector<int>* cols = nullptr) {
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (int k = 0; k < g.dim(1); ++k) dlogits.at(rows[a], cols ? (*cols)[k] : k) += g.at(static_cast<int>(a), k);
  };

  // Cross-entropy on original and exemplar rows only.
  probe.ce_rows = static_cast<int>(real_rows.size());
  if (!real_rows.empty()) {
    std::vector<int> targets;
    for (int r : real_rows) targets.push_back(batch.targets[r]);
    const auto ce = loss::ce_loss_logits(rows_of(s_logits, real_rows), targets);
    rep.ce = ce.value;
    scatter(ce.grad, real_rows);
  }
  for (int r : old_syn_rows)
    for (int k = 0; k < n_all; ++k) probe.ce_grad_on_synthetic += std::abs(dlogits.at(r, k));
  for (int r : new_syn_rows)
    for (int k = 0; k < n_all; ++k) probe.ce_grad_on_synthetic += std::abs(dlogits.at(r, k));

  // Less-forget on every row.
  {
    const auto lf = loss::lf_loss(t.features.cast<double>(), s.features.cast<double>());
    rep.lf = lf.value;
    for (std::size_t k = 0; k < dfeat.size(); ++k) dfeat[k] = alpha_ * lf.grad[k];
  }

  // Distillation against the imprint-extended previous model on old-class synthetic rows.
  if (!old_syn_rows.empty()) {
    const auto kd = loss::dfkd_loss(rows_of(t.logits.cast<double>(), old_syn_rows), rows_of(s_logits, old_syn_rows));
    rep.dfkd = kd.value;
    scatter(kd.grad, old_syn_rows);
  }

  model::Classifier::Output h;
  const bool need_h = h_i_ && (dtid_ || !new_syn_rows.empty());
  if (need_h) h = h_i_->forward(batch.images, Mode::Eval);

  // New-class synthetic rows: softmax over the new classes only, against h_i without imprinting.
  if (!new_syn_rows.empty()) {
    const auto kd = loss::dfkd_loss(rows_of(h.logits.cast<double>(), new_syn_rows),
                                    rows_of(s_logits, new_syn_rows, &new_columns_));
    rep.dfkd_new = kd.value;
    scatter(kd.grad, new_syn_rows, &new_columns_);
  }

  std::vector<Tensor> dstage(s.stage_maps.size());
  if (dtid_) {
    const auto& taps = dtid_->taps();
    const std::vector<std::vector<Tensor>> tmaps{dtid::select_maps(t.stage_maps, taps),
                                                 dtid::select_maps(h.stage_maps, taps)};
    auto step = dtid_->loss_and_backward(tmaps, dtid::select_maps(s.stage_maps, taps), Mode::Train);
    rep.dtid = step.value;
    for (int k = 0; k < taps.size(); ++k) dstage[taps.stage_ids[k]] = std::move(step.d_student[k]);
  }

  student_.backward(dlogits.cast<float>(), dfeat.cast<float>(), dstage, false);
  probe.pre_clip_norm = nn::clip_grad_norm(params, cfg_.clip_norm);
  probe.post_clip_norm = nn::grad_norm(params);
  opt_->step();

  rep.weighted_total = loss::total_objective(rep, alpha_);
  probe.min_sigma2 = std::numeric_limits<double>::infinity();
  if (dtid_)
    for (int k = 0; k < dtid_->taps().size(); ++k)
      for (int c = 0; c < dtid_->log_variance(k).value.dim(0); ++c)
        probe.min_sigma2 = std::min(probe.min_sigma2, dtid_->sigma2(k, c));
  for (const auto& g : gen_trainers_) probe.generator_updates.push_back(g->steps());
  return probe;
}

PhaseResult IncrementTrainer::run(const Hooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  const nn::MultiStepSchedule sched{cfg_.lr, cfg_.effective_milestones(), cfg_.lr_factor};
  PhaseResult res;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    opt_->set_lr(sched.lr_at(epoch));
    ReportMean mean;
    for (int b = 0; b < cfg_.batches_per_epoch; ++b) {
      const MixedBatch batch = next_batch();
      const StepProbe probe = train_step(batch);
      mean.add(probe.report);
      if (hooks.on_step) hooks.on_step(probe);
    }
    res.epoch_reports.push_back(mean.mean());
    if (hooks.loss_log) {
      auto line = loss::to_json_line(steps_, res.epoch_reports.back());
      line["epoch"] = epoch;
      *hooks.loss_log << line.dump() << '\n';
    }
  }
  res.model = student_;
  res.model.set_frozen(true);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.class_accuracy = metrics::evaluate_model(res.model, data_, timeline_, cfg_.time_index);
  res.consumed = consumed_;
  for (const auto& g : gen_trainers_) res.generator_updates.push_back(g->steps());
  return res;
}

PhaseResult train_increment(const Dataset& data, const protocol::TaskTimeline& timeline, int i,
                            const protocol::ExemplarStore& store, model::Classifier& f_prev, model::Classifier* h_i,
                            gen::ConditionalGenerator* old_gen, const PhaseConfig& cfg, const Hooks& hooks) {
  PhaseConfig c = cfg;
  c.time_index = i;
  require(c.n_generators <= 1, "conventional phases use at most one generator; see the data-limited entry point");
  IncrementTrainer tr(data, timeline, store, f_prev, h_i, old_gen, nullptr, c);
  return tr.run(hooks);
}

PhaseResult train_increment_data_limited(const Dataset& data, const protocol::TaskTimeline& timeline, int i,
                                         const protocol::ExemplarStore& store, model::Classifier& f_prev,
                                         model::Classifier& h_i, gen::ConditionalGenerator& old_gen,
                                         gen::ConditionalGenerator& new_gen, const PhaseConfig& cfg,
                                         const Hooks& hooks) {
  PhaseConfig c = cfg;
  c.time_index = i;
  c.n_generators = 2;
  c.data_limited = true;
  require(c.n_data >= 1, "data-limited phases need a positive per-class sample budget");
  IncrementTrainer tr(data, timeline, store, f_prev, &h_i, &old_gen, &new_gen, c);
  return tr.run(hooks);
}

}  // namespace dtcil::train
