// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <numeric>

#include "dtcil/metrics.hpp"
#include "dtcil/trainer.hpp"

using namespace dtcil;
using namespace dtcil::train;

namespace {

struct World {
  Dataset data;
  protocol::TaskTimeline timeline;
  model::BackboneConfig arch;
  gen::GeneratorConfig garch;
};

World& world() {
  static World w = [] {
    World w;
    ToyDatasetConfig dc;
    dc.image_size = 16;
    dc.train_per_class = 16;
    dc.test_per_class = 4;
    w.data = make_toy_dataset(dc);
    std::vector<int> ids(10);
    std::iota(ids.begin(), ids.end(), 0);
    w.timeline = protocol::build_timeline(ids, 5, 5, 3);
    w.timeline.attach_splits(w.data);
    w.arch.image_size = 16;
    w.arch.stage_widths = {8, 16, 32};
    w.arch.input_mean = w.data.channel_mean;
    w.arch.input_std = w.data.channel_std;
    w.garch.image_size = 16;
    w.garch.noise_size = 4;
    w.garch.noise_channels = 8;
    w.garch.widths = {16, 8, 4};
    return w;
  }();
  return w;
}

PhaseConfig tiny_cfg() {
  PhaseConfig c;
  c.batch_size = 16;
  c.epochs = 1;
  c.batches_per_epoch = 2;
  c.gen_warmup_steps = 2;
  c.gen_batch_size = 8;
  c.seed = 4;
  return c;
}

}  // namespace

TEST_CASE("phase config json round trip and validation") {
  PhaseConfig c = tiny_cfg();
  c.milestones = {3, 5};
  nlohmann::json j = c;
  auto back = j.get<PhaseConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(PhaseConfig{}.effective_milestones() == std::vector<int>{10, 15});
  c.batch_size = 10;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("training pool honours the per-class budget") {
  auto& w = world();
  const auto& task = w.timeline.task(1);
  CHECK(training_pool(w.data, task, -1, 1).size() == task.train_split.size());
  auto pool = training_pool(w.data, task, 3, 1);
  CHECK(pool.size() == 15);
  CHECK(pool == training_pool(w.data, task, 3, 1));
}

TEST_CASE("instrumented two-batch increment") {
  auto& w = world();
  const PhaseConfig cfg = tiny_cfg();
  auto f0 = train_base(w.data, w.timeline.task(0), w.arch, cfg);
  auto h1 = train_second_teacher(w.data, w.timeline.task(1), w.arch, cfg);
  CHECK(f0.frozen());
  CHECK(h1.frozen());
  auto g_old = warm_up_generator(f0, w.garch, cfg);
  protocol::ExemplarStore store(2);
  for (int c : w.timeline.task(0).classes)
    store.add(c, protocol::select_exemplars(w.timeline.task(0).train_split, w.data, c, 2, 1), &w.data);

  for (bool with_exemplars : {true, false}) {
    CAPTURE(with_exemplars);
    PhaseConfig c = cfg;
    c.time_index = 1;
    c.n_teachers = 2;
    c.n_generators = 1;
    c.n_reserved = with_exemplars ? 2 : 0;
    const auto f0_sum = f0.checksum();
    const auto h1_sum = h1.checksum();
    auto g_copy = g_old;
    IncrementTrainer tr(w.data, w.timeline, store, f0, &h1, &g_copy, nullptr, c);
    REQUIRE(tr.dtid_state() != nullptr);
    for (int k = 0; k < tr.dtid_state()->taps().size(); ++k)
      for (float v : tr.dtid_state()->log_variance(k).value.vec()) CHECK(v == 0.0f);
    const auto old_rows = tr.student().head.weight.value.slice0(0, 5);
    const int syn = tr.composition().old_synthetic;
    CHECK(syn == (with_exemplars ? 4 : 8));
    for (int step = 0; step < 2; ++step) {
      auto batch = tr.next_batch();
      CHECK(batch.size() == 16);
      auto p = tr.train_step(batch);
      CHECK(p.ce_rows == 16 - syn);
      CHECK(p.ce_grad_on_synthetic == 0.0);
      CHECK(p.post_clip_norm <= 1.0 + 1e-6);
      CHECK(p.min_sigma2 > 0.0);
      REQUIRE(p.generator_updates.size() == 1);
      CHECK(p.generator_updates[0] == step + 1);
      CHECK(p.report.dtid.has_value());
      CHECK(p.report.dfkd.has_value());
      CHECK(!p.report.dfkd_new.has_value());
    }
    CHECK(tr.student().head.weight.value.slice0(0, 5) == old_rows);
    CHECK(f0.checksum() == f0_sum);
    CHECK(h1.checksum() == h1_sum);
  }
}

TEST_CASE("data-limited increment uses both generators") {
  auto& w = world();
  PhaseConfig cfg = tiny_cfg();
  auto f0 = train_base(w.data, w.timeline.task(0), w.arch, cfg);
  PhaseConfig hc = cfg;
  hc.n_data = 4;
  auto h1 = train_second_teacher(w.data, w.timeline.task(1), w.arch, hc);
  auto g_old = warm_up_generator(f0, w.garch, cfg);
  auto g_new = warm_up_generator(h1, w.garch, cfg);
  protocol::ExemplarStore store(0);
  PhaseConfig c = cfg;
  c.n_teachers = 2;
  c.n_data = 4;
  std::vector<StepProbe> probes;
  Hooks hooks;
  hooks.on_step = [&](const StepProbe& p) { probes.push_back(p); };
  auto res = train_increment_data_limited(w.data, w.timeline, 1, store, f0, h1, g_old, g_new, c, hooks);
  REQUIRE(probes.size() == 2);
  CHECK(probes[0].composition == protocol::BatchComposition{4, 4, 0, 8});
  CHECK(probes[1].report.dfkd_new.has_value());
  CHECK(probes[1].generator_updates == std::vector<long>{2, 2});
  CHECK(res.model.frozen());
  CHECK(res.class_accuracy.size() == 10);
  CHECK(res.consumed[Slot::NewSynthetic] == 8);
}

TEST_CASE("single-teacher increment has no adapters") {
  auto& w = world();
  PhaseConfig cfg = tiny_cfg();
  auto f0 = train_base(w.data, w.timeline.task(0), w.arch, cfg);
  protocol::ExemplarStore store(0);
  PhaseConfig c = cfg;
  c.time_index = 1;
  IncrementTrainer tr(w.data, w.timeline, store, f0, nullptr, nullptr, nullptr, c);
  CHECK(tr.dtid_state() == nullptr);
  CHECK(tr.composition() == protocol::BatchComposition{16, 0, 0, 0});
  auto p = tr.train_step(tr.next_batch());
  CHECK(!p.report.dtid.has_value());
  CHECK(!p.report.dfkd.has_value());
  CHECK(p.ce_rows == 16);
  c.n_teachers = 2;
  CHECK_THROWS_AS(IncrementTrainer(w.data, w.timeline, store, f0, nullptr, nullptr, nullptr, c), Error);
}
