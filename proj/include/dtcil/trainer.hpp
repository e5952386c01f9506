// SPDX-License-Identifier: Apache-2.0
//
// Base training, second-teacher training and incremental phases.

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcil/backbone.hpp"
#include "dtcil/dtid.hpp"
#include "dtcil/generator.hpp"
#include "dtcil/losses.hpp"
#include "dtcil/protocol.hpp"

namespace dtcil::train {

struct PhaseConfig {
  int time_index = 0;
  int n_teachers = 1;    // N_t: 1 = previous model only, 2 = previous model and new-class model
  int n_generators = 0;  // N_g
  int n_data = -1;       // N_D: training samples per new class, -1 = all
  int n_reserved = 0;    // N_R: exemplars kept per old class
  int batch_size = 128;
  int epochs = 20;
  int batches_per_epoch = 50;
  double lr = 0.1;
  /// Epochs at which the learning rate is multiplied by `lr_factor`; empty = 50% and 75% of `epochs`.
  std::vector<int> milestones;
  double lr_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double alpha0 = 5.0;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  // Generator warm-up before incremental training and its optimizer.
  int gen_warmup_steps = 2000;
  int gen_batch_size = 128;
  double gen_lr = 1e-3;
  double gen_beta1 = 0.5;

  /// Start the new-class model from the previous feature extractor instead of random weights.
  bool second_teacher_warm_start = false;
  bool data_limited = false;

  std::vector<int> effective_milestones() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const PhaseConfig& c);
void from_json(const nlohmann::json& j, PhaseConfig& c);

/// Batch slot of one row of a mixed batch.
enum class Slot { NewOriginal, NewSynthetic, OldExemplar, OldSynthetic };

inline bool is_synthetic(Slot s) { return s == Slot::NewSynthetic || s == Slot::OldSynthetic; }

struct MixedBatch {
  Tensor images;
  std::vector<int> targets;  // index into the student head
  std::vector<Slot> slots;
  int size() const { return static_cast<int>(slots.size()); }
};

/// Per-step observations for auditing a run.
struct StepProbe {
  long step = 0;
  protocol::BatchComposition composition;
  loss::LossReport report;
  int ce_rows = 0;
  /// Sum of |d CE / d logits| over synthetic rows; zero by construction.
  double ce_grad_on_synthetic = 0;
  double pre_clip_norm = 0;
  double post_clip_norm = 0;
  double min_sigma2 = 0;
  std::vector<long> generator_updates;
};

struct PhaseResult {
  model::Classifier model;
  std::vector<loss::LossReport> epoch_reports;
  double wall_seconds = 0;
  std::map<int, double> class_accuracy;
  std::map<Slot, long> consumed;
  std::vector<long> generator_updates;
};

struct Hooks {
  std::function<void(const StepProbe&)> on_step;
  /// Receives one JSON line per epoch (mean of each loss term).
  std::ostream* loss_log = nullptr;
};

/// Training pool of a task: every train sample of its classes, or N_D per class when limited.
std::vector<protocol::SampleRef> training_pool(const Dataset& data, const protocol::TaskSpec& task, int n_per_class,
                                               std::uint64_t seed);

/// Plain cross-entropy training with Nesterov momentum on the given samples.
model::Classifier train_classifier(const Dataset& data, const std::vector<protocol::SampleRef>& pool,
                                   model::Classifier init, const PhaseConfig& cfg, const Hooks& hooks = {});

model::Classifier train_base(const Dataset& data, const protocol::TaskSpec& task0, const model::BackboneConfig& arch,
                             const PhaseConfig& cfg, const Hooks& hooks = {});

/// New-class model h_i over C_i only; returned frozen.
model::Classifier train_second_teacher(const Dataset& data, const protocol::TaskSpec& task,
                                       const model::BackboneConfig& arch, const PhaseConfig& cfg,
                                       const model::Classifier* warm_start = nullptr, const Hooks& hooks = {});

/// Generator for all classes of `teacher`, trained for cfg.gen_warmup_steps.
gen::ConditionalGenerator warm_up_generator(model::Classifier& teacher, const gen::GeneratorConfig& arch,
                                            const PhaseConfig& cfg, std::ostream* log = nullptr);

/// Owns the student, adapters and optimizer state of one incremental phase.
class IncrementTrainer {
 public:
  /// `old_gen` replays the classes of `f_prev`; `new_gen` replays those of `h_i`.
  IncrementTrainer(const Dataset& data, const protocol::TaskTimeline& timeline, const protocol::ExemplarStore& store,
                   model::Classifier& f_prev, model::Classifier* h_i, gen::ConditionalGenerator* old_gen,
                   gen::ConditionalGenerator* new_gen, const PhaseConfig& cfg);

  /// Draws the next mixed batch; every generator that supplies rows takes one update first.
  MixedBatch next_batch();
  /// One optimization step on a given batch.
  StepProbe train_step(const MixedBatch& batch);
  /// Runs every epoch and returns the trained student (frozen teachers untouched).
  PhaseResult run(const Hooks& hooks = {});

  model::Classifier& student() { return student_; }
  const protocol::BatchComposition& composition() const { return comp_; }
  const dtid::DTIDState* dtid_state() const { return dtid_ ? &*dtid_ : nullptr; }
  double alpha() const { return alpha_; }
  int n_old() const { return n_old_; }

 private:
  struct Cycler {
    std::vector<protocol::SampleRef> pool;
    std::vector<std::size_t> order;
    std::size_t at = 0;
    protocol::SampleRef next(nn::Rng& rng);
  };
  void append_real(MixedBatch& b, Cycler& c, int count, Slot slot);
  void append_synthetic(MixedBatch& b, int which, int count, Slot slot);

  const Dataset& data_;
  const protocol::TaskTimeline& timeline_;
  PhaseConfig cfg_;
  model::Classifier& f_prev_;
  model::Classifier* h_i_;
  model::Classifier teacher_ext_;  // f_prev with imprinted new-class weights, frozen
  model::Classifier student_;
  std::optional<dtid::DTIDState> dtid_;
  std::vector<gen::ConditionalGenerator*> gens_;  // [old, new]
  std::vector<std::unique_ptr<gen::GeneratorTrainer>> gen_trainers_;
  std::vector<std::unique_ptr<gen::NoiseLabelSampler>> gen_samplers_;
  std::vector<std::vector<int>> gen_to_student_;  // generator label -> student head index
  std::vector<int> new_columns_;                  // student head index of each h_i class
  std::unique_ptr<nn::NesterovSgd> opt_;
  protocol::BatchComposition comp_;
  Cycler new_pool_, exemplar_pool_;
  nn::Rng rng_;
  double alpha_ = 0;
  int n_old_ = 0;
  long steps_ = 0;
  std::map<Slot, long> consumed_;
};

PhaseResult train_increment(const Dataset& data, const protocol::TaskTimeline& timeline, int i,
                            const protocol::ExemplarStore& store, model::Classifier& f_prev, model::Classifier* h_i,
                            gen::ConditionalGenerator* old_gen, const PhaseConfig& cfg, const Hooks& hooks = {});

PhaseResult train_increment_data_limited(const Dataset& data, const protocol::TaskTimeline& timeline, int i,
                                         const protocol::ExemplarStore& store, model::Classifier& f_prev,
                                         model::Classifier& h_i, gen::ConditionalGenerator& old_gen,
                                         gen::ConditionalGenerator& new_gen, const PhaseConfig& cfg,
                                         const Hooks& hooks = {});

}  // namespace dtcil::train
