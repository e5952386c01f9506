// SPDX-License-Identifier: Apache-2.0

#include "dtcil/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "dtcil/io.hpp"

namespace dtcil {

void to_json(nlohmann::json& j, const ToyDatasetConfig& c) {
  j = nlohmann::json{{"num_classes", c.num_classes},         {"image_size", c.image_size},
                     {"train_per_class", c.train_per_class}, {"test_per_class", c.test_per_class},
                     {"pixel_noise", c.pixel_noise},         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ToyDatasetConfig& c) {
  const ToyDatasetConfig d;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.image_size = j.value("image_size", d.image_size);
  c.train_per_class = j.value("train_per_class", d.train_per_class);
  c.test_per_class = j.value("test_per_class", d.test_per_class);
  c.pixel_noise = j.value("pixel_noise", d.pixel_noise);
  c.seed = j.value("seed", d.seed);
}

}  // namespace dtcil

namespace dtcil::exp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Phase fields owned by the top level of the experiment config.
const std::vector<std::string> kTopLevelPhaseKeys{"time_index", "seed",       "n_teachers",  "n_generators",
                                                  "n_data",     "n_reserved", "data_limited"};

json phase_echo(const train::PhaseConfig& p) {
  json j = p;
  for (const auto& k : kTopLevelPhaseKeys) j.erase(k);
  return j;
}

// Unknown keys are typos or stale fields; reject them instead of ignoring them.
void check_keys(const json& j, const json& allowed, const std::string& where) {
  require(j.is_object(), where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    require(allowed.contains(k), "unknown key '" + k + "' in " + where);
    if (v.is_object() && allowed.at(k).is_object() && !allowed.at(k).empty())
      check_keys(v, allowed.at(k), where + "." + k);
  }
}

train::PhaseConfig parse_phase(const json& j, const std::string& where) {
  const json allowed = phase_echo(train::PhaseConfig{});
  for (const auto& k : kTopLevelPhaseKeys)
    require(!j.contains(k), "'" + k + "' in " + where + " is set at the top level of the config, not per phase");
  check_keys(j, allowed, where);
  return j.get<train::PhaseConfig>();
}

std::string scenario_name(Scenario s) { return s == Scenario::DataLimited ? "data-limited" : "conventional"; }

Scenario parse_scenario(const std::string& s) {
  if (s == "conventional") return Scenario::Conventional;
  if (s == "data-limited") return Scenario::DataLimited;
  throw Error("scenario must be 'conventional' or 'data-limited', got '" + s + "'");
}

ExperimentConfig desk_defaults() {
  ExperimentConfig c;
  c.dataset.image_size = 16;
  c.dataset.train_per_class = 200;
  c.dataset.test_per_class = 50;
  c.backbone.image_size = 16;
  c.backbone.stage_widths = {16, 32, 64};
  c.generator.image_size = 16;
  c.generator.widths = {32, 16, 8};
  c.base.batch_size = 64;
  c.base.batches_per_epoch = 10;
  c.second_teacher = c.base;
  c.increment.batch_size = 64;
  c.increment.gen_batch_size = 64;
  c.base.gen_batch_size = c.second_teacher.gen_batch_size = 64;
  return c;
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  io::write_text(tmp, text);
  fs::rename(tmp, path);
}

std::vector<int> all_class_ids(int n) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

json strip_run_fields(json j) {
  for (const char* k : {"seeds", "output_dir", "device"}) j.erase(k);
  return j;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

int ExperimentConfig::num_times() const {
  return 1 + (dataset.num_classes - timeline.base_classes) / timeline.increment;
}

train::PhaseConfig ExperimentConfig::phase(int i, std::uint64_t seed) const {
  require(i >= 0 && i < num_times(), "time index " + std::to_string(i) + " outside the timeline");
  train::PhaseConfig p;
  if (i == 0) {
    p = base;
  } else {
    json j = increment;
    auto it = phase_overrides.find(i);
    if (it != phase_overrides.end()) j.merge_patch(it->second);
    p = j.get<train::PhaseConfig>();
    p.n_teachers = n_teachers;
    p.n_generators = scenario == Scenario::DataLimited ? 2 : n_generators;
    p.n_data = n_data;
    p.n_reserved = n_reserved;
    p.data_limited = scenario == Scenario::DataLimited;
  }
  p.time_index = i;
  p.seed = seed;
  return p;
}

void ExperimentConfig::validate() const {
  require(!name.empty(), "name must not be empty");
  require(dataset.num_classes >= 2 && dataset.num_classes <= 10, "dataset.num_classes must be in 2..10");
  require(dataset.image_size >= 8, "dataset.image_size must be at least 8");
  require(dataset.train_per_class >= 1 && dataset.test_per_class >= 1, "dataset needs train and test samples");
  require(dataset.pixel_noise >= 0, "dataset.pixel_noise must be non-negative");
  require(timeline.base_classes >= 1 && timeline.base_classes < dataset.num_classes,
          "timeline.base_classes must leave at least one class for an increment");
  require(timeline.increment >= 1, "timeline.increment must be positive");
  require((dataset.num_classes - timeline.base_classes) % timeline.increment == 0,
          "remaining classes (" + std::to_string(dataset.num_classes - timeline.base_classes) +
              ") must split into increments of " + std::to_string(timeline.increment));
  require(n_teachers == 1 || n_teachers == 2, "n_teachers must be 1 or 2");
  if (scenario == Scenario::DataLimited) {
    require(n_generators == 2, "data-limited scenario requires n_generators = 2");
    require(n_teachers == 2, "data-limited scenario requires n_teachers = 2");
    require(n_data >= 1, "data-limited scenario requires n_data >= 1");
  } else {
    require(n_generators == 0 || n_generators == 1, "conventional scenario allows n_generators 0 or 1");
  }
  require(n_data == -1 || (n_data >= 1 && n_data <= dataset.train_per_class),
          "n_data must be -1 or within 1..train_per_class");
  require(n_reserved >= 0 && n_reserved <= dataset.train_per_class, "n_reserved must be within 0..train_per_class");
  if (n_data >= 1) require(n_reserved <= n_data, "n_reserved cannot exceed n_data");
  require(!seeds.empty(), "seeds must not be empty");
  require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds must be unique");
  require(!output_dir.empty(), "output_dir must not be empty");
  require(device == "cpu", "device '" + device + "' is not available; this build supports 'cpu'");

  backbone.validate();
  require(backbone.image_size == dataset.image_size, "backbone.image_size must equal dataset.image_size");
  require(backbone.in_channels == 3, "backbone.in_channels must be 3 for the toy dataset");
  gen::GeneratorConfig g = generator;
  g.num_classes = 1;
  require(g.image_size == dataset.image_size, "generator.image_size must equal dataset.image_size");
  g.validate();

  base.validate();
  second_teacher.validate();
  for (const auto& [i, j] : phase_overrides) {
    require(i >= 1 && i < num_times(), "phase override for time " + std::to_string(i) + " outside 1.." +
                                           std::to_string(num_times() - 1));
    parse_phase(j, "phase_overrides." + std::to_string(i));
  }
  const bool has_exemplars = n_reserved > 0;
  for (int i = 1; i < num_times(); ++i) {
    const auto p = phase(i, seeds.front());
    p.validate();
    protocol::compose_batch(has_exemplars, p.n_generators, p.batch_size);
    const int n_old = timeline.base_classes + (i - 1) * timeline.increment;
    loss::alpha_schedule(p.alpha0, n_old, timeline.increment, has_exemplars);
  }
}

void to_json(json& j, const ExperimentConfig& c) {
  json overrides = json::object();
  for (const auto& [i, o] : c.phase_overrides) overrides[std::to_string(i)] = o;
  j = json{{"name", c.name},
           {"dataset", c.dataset},
           {"timeline", {{"base_classes", c.timeline.base_classes}, {"increment", c.timeline.increment}}},
           {"scenario", scenario_name(c.scenario)},
           {"n_teachers", c.n_teachers},
           {"n_generators", c.n_generators},
           {"n_data", c.n_data},
           {"n_reserved", c.n_reserved},
           {"seeds", c.seeds},
           {"output_dir", c.output_dir},
           {"device", c.device},
           {"backbone", c.backbone},
           {"generator", c.generator},
           {"base", phase_echo(c.base)},
           {"second_teacher", phase_echo(c.second_teacher)},
           {"increment", phase_echo(c.increment)},
           {"phase_overrides", overrides}};
  // The generator's class count is set from its teacher at warm-up time.
  j["generator"].erase("num_classes");
}

void from_json(const json& j, ExperimentConfig& c) {
  const ExperimentConfig d = desk_defaults();
  check_keys(j, json(d), "config");
  c = d;
  c.name = j.value("name", d.name);
  if (j.contains("timeline")) {
    c.timeline.base_classes = j["timeline"].value("base_classes", d.timeline.base_classes);
    c.timeline.increment = j["timeline"].value("increment", d.timeline.increment);
  }
  c.scenario = parse_scenario(j.value("scenario", scenario_name(d.scenario)));
  c.n_teachers = j.value("n_teachers", d.n_teachers);
  c.n_generators = j.value("n_generators", d.n_generators);
  c.n_data = j.value("n_data", d.n_data);
  c.n_reserved = j.value("n_reserved", d.n_reserved);
  c.seeds = j.value("seeds", d.seeds);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.device = j.value("device", d.device);
  auto merged = [&](const char* key, const json& defaults) {
    json m = defaults;
    if (j.contains(key)) m.merge_patch(j[key]);
    return m;
  };
  c.dataset = merged("dataset", d.dataset).get<ToyDatasetConfig>();
  c.backbone = merged("backbone", d.backbone).get<model::BackboneConfig>();
  c.generator = merged("generator", d.generator).get<gen::GeneratorConfig>();
  c.base = parse_phase(merged("base", phase_echo(d.base)), "base");
  c.second_teacher = parse_phase(merged("second_teacher", phase_echo(d.second_teacher)), "second_teacher");
  c.increment = parse_phase(merged("increment", phase_echo(d.increment)), "increment");
  c.phase_overrides.clear();
  if (j.contains("phase_overrides")) {
    require(j["phase_overrides"].is_object(), "phase_overrides must be an object keyed by time index");
    for (const auto& [k, v] : j["phase_overrides"].items()) {
      int i = 0;
      try {
        i = std::stoi(k);
      } catch (const std::exception&) {
        throw Error("phase_overrides key '" + k + "' is not a time index");
      }
      parse_phase(v, "phase_overrides." + k);
      c.phase_overrides[i] = v;
    }
  }
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw Error(std::string("config has a field of the wrong type: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  require(fs::exists(path), "config file " + path.string() + " does not exist");
  return parse_config(io::read_text(path));
}

void apply_env_overrides(ExperimentConfig& c) {
  if (const char* v = std::getenv(kEnvOutputDir); v && *v) c.output_dir = v;
  if (const char* v = std::getenv(kEnvDevice); v && *v) c.device = v;
}

fs::path seed_dir(const fs::path& root, std::uint64_t seed) { return root / ("seed_" + std::to_string(seed)); }

fs::path phase_dir(const fs::path& seed_root, int time_index) {
  return seed_root / ("phase_" + std::to_string(time_index));
}

std::string aggregate_csv(const std::vector<std::vector<metrics::ResultRow>>& per_seed) {
  require(!per_seed.empty(), "no runs to aggregate");
  std::map<int, std::vector<const metrics::ResultRow*>> by_time;
  for (const auto& rows : per_seed)
    for (const auto& r : rows) by_time[r.time].push_back(&r);
  std::ostringstream os;
  os << kAggregateHeader << '\n';
  for (const auto& [t, rows] : by_time) {
    require(rows.size() == per_seed.size(), "time " + std::to_string(t) + " is missing in some seeds");
    auto stats = [&](auto get) {
      const double n = static_cast<double>(rows.size());
      double m = 0;
      for (const auto* r : rows) m += get(*r) / n;
      double v = 0;
      for (const auto* r : rows) v += (get(*r) - m) * (get(*r) - m);
      return std::pair{m, rows.size() > 1 ? std::sqrt(v / (n - 1)) : 0.0};
    };
    const auto [am, as] = stats([](const metrics::ResultRow& r) { return r.avg_accuracy; });
    const auto [fm, fs_] = stats([](const metrics::ResultRow& r) { return r.avg_forgetting; });
    os << t << ',' << rows.size() << ',' << fmt(am) << ',' << fmt(as) << ',' << fmt(fm) << ','
       << (std::isnan(fm) ? "nan" : fmt(fs_)) << '\n';
  }
  return os.str();
}

namespace {

struct SeedRun {
  const ExperimentConfig& cfg;
  const Dataset& data;
  std::uint64_t seed;
  fs::path root;
  const ProgressFn& progress;
  RunSummary& summary;

  void report(int i, const char* stage) const {
    if (progress) progress(Progress{seed, i, stage});
  }

  void add_exemplars(protocol::ExemplarStore& store, const protocol::TaskSpec& task, const train::PhaseConfig& p) {
    if (cfg.n_reserved == 0) return;
    const int budget = task.time_index == 0 ? -1 : p.n_data;
    const auto candidates = train::training_pool(data, task, budget, seed);
    for (int c : task.classes)
      store.add(c,
                protocol::select_exemplars(candidates, data, c, cfg.n_reserved,
                                           seed * 7001ULL + static_cast<std::uint64_t>(c)),
                &data);
  }

  metrics::AccuracyLedger operator()() {
    fs::create_directories(root);
    ExperimentConfig echo = cfg;
    echo.seeds = {seed};
    write_atomic(root / "config.json", json(echo).dump(2) + "\n");

    protocol::TaskTimeline timeline =
        protocol::build_timeline(all_class_ids(cfg.dataset.num_classes), cfg.timeline.base_classes,
                                 cfg.timeline.increment, seed);
    timeline.attach_splits(data);
    auto ledger = metrics::AccuracyLedger::from_timeline(timeline);
    protocol::ExemplarStore store(cfg.n_reserved);
    model::Classifier f_prev;

    for (int i = 0; i < timeline.size(); ++i) {
      const fs::path pd = phase_dir(root, i);
      const train::PhaseConfig p = cfg.phase(i, seed);
      model::Classifier f;
      std::map<int, double> acc;
      if (fs::exists(pd / "DONE")) {
        report(i, "skip");
        f = model::load_classifier(pd / "model.bin");
        f.set_frozen(true);
        const json saved = json::parse(io::read_text(pd / "accuracy.json"));
        for (const auto& [k, v] : saved.items()) acc[std::stoi(k)] = v.get<double>();
        ++summary.phases_skipped;
      } else {
        if (fs::exists(pd)) fs::remove_all(pd);  // partial phase from an interrupted run
        fs::create_directories(pd);
        io::write_text(pd / "phase_config.json", json(p).dump(2) + "\n");
        std::ofstream log(pd / "loss_log.jsonl");
        train::Hooks hooks;
        hooks.loss_log = &log;
        json info;
        if (i == 0) {
          report(i, "base");
          f = train::train_base(data, timeline.task(0), cfg.backbone, p, hooks);
          acc = metrics::evaluate_model(f, data, timeline, 0);
        } else {
          f = run_increment(timeline, i, store, f_prev, p, pd, hooks, acc, info);
        }
        model::save_classifier(pd / "model.bin", f);
        json aj = json::object();
        for (const auto& [c, a] : acc) aj[std::to_string(c)] = a;
        io::write_text(pd / "accuracy.json", aj.dump(2) + "\n");
        protocol::ExemplarStore next = store;
        add_exemplars(next, timeline.task(i), p);
        protocol::save_timeline(pd / "timeline.jsonl", timeline, next);
        write_atomic(pd / "DONE", info.dump(2) + "\n");
        ++summary.phases_trained;
      }
      add_exemplars(store, timeline.task(i), p);
      ledger.record(i, acc);
      f_prev = std::move(f);
    }

    protocol::save_timeline(root / "timeline.jsonl", timeline, store);
    write_atomic(root / "ledger.json", json(ledger).dump(2) + "\n");
    const auto rows = metrics::result_rows(ledger, seed);
    write_atomic(root / "results.csv", metrics::results_csv(rows));
    metrics::Series a{"seed " + std::to_string(seed), {}, {}}, fg = a;
    for (const auto& r : rows) {
      a.x.push_back(r.time);
      a.y.push_back(r.avg_accuracy);
      fg.x.push_back(r.time);
      fg.y.push_back(r.avg_forgetting);
    }
    write_atomic(root / "curves.svg", metrics::curves_svg({a}, {fg}));
    return ledger;
  }

  model::Classifier run_increment(const protocol::TaskTimeline& timeline, int i, const protocol::ExemplarStore& store,
                                  model::Classifier& f_prev, const train::PhaseConfig& p, const fs::path& pd,
                                  const train::Hooks& hooks, std::map<int, double>& acc, json& info) {
    std::optional<model::Classifier> h;
    if (p.n_teachers == 2 || p.data_limited) {
      report(i, "second_teacher");
      train::PhaseConfig hp = cfg.second_teacher;
      hp.time_index = i;
      hp.seed = seed;
      hp.n_data = p.n_data;
      h = train::train_second_teacher(data, timeline.task(i), cfg.backbone, hp,
                                      hp.second_teacher_warm_start ? &f_prev : nullptr);
      model::save_classifier(pd / "second_teacher.bin", *h);
    }
    std::optional<gen::ConditionalGenerator> g_old, g_new;
    if (p.n_generators >= 1) {
      report(i, "generator");
      std::ofstream glog(pd / "generator_warmup.jsonl");
      g_old = train::warm_up_generator(f_prev, cfg.generator, p, &glog);
      if (p.n_generators == 2) {
        std::ofstream nlog(pd / "generator_new_warmup.jsonl");
        g_new = train::warm_up_generator(*h, cfg.generator, p, &nlog);
      }
    }
    report(i, "increment");
    train::IncrementTrainer tr(data, timeline, store, f_prev, h ? &*h : nullptr, g_old ? &*g_old : nullptr,
                               g_new ? &*g_new : nullptr, p);
    auto res = tr.run(hooks);
    if (g_old) gen::save_generator(pd / "generator_old.bin", *g_old);
    if (g_new) gen::save_generator(pd / "generator_new.bin", *g_new);
    if (auto* d = const_cast<dtid::DTIDState*>(tr.dtid_state())) d->save(pd / "dtid_state.bin");
    acc = res.class_accuracy;
    info["wall_seconds"] = res.wall_seconds;
    info["generator_updates"] = res.generator_updates;
    json consumed = json::object();
    const char* names[] = {"new_original", "new_synthetic", "old_exemplar", "old_synthetic"};
    for (const auto& [slot, n] : res.consumed) consumed[names[static_cast<int>(slot)]] = n;
    info["consumed"] = consumed;
    return std::move(res.model);
  }
};

}  // namespace

std::vector<ExperimentConfig> alpha_sweep(const ExperimentConfig& cfg, const std::vector<double>& alpha0_values) {
  require(!alpha0_values.empty(), "alpha0 sweep needs at least one value");
  std::vector<ExperimentConfig> out;
  for (double a : alpha0_values) {
    require(a > 0, "alpha0 must be positive");
    ExperimentConfig c = cfg;
    c.increment.alpha0 = a;
    for (auto& [t, o] : c.phase_overrides)
      if (o.contains("alpha0")) o["alpha0"] = a;
    std::ostringstream tag;
    tag << "alpha0_" << a;
    c.output_dir = (fs::path(cfg.output_dir) / tag.str()).string();
    c.name = cfg.name + "_" + tag.str();
    c.validate();
    out.push_back(std::move(c));
  }
  return out;
}

RunSummary run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const fs::path root(cfg.output_dir);
  fs::create_directories(root);
  const json echo = cfg;
  const fs::path cfg_path = root / "config.json";
  if (fs::exists(cfg_path)) {
    const json previous = json::parse(io::read_text(cfg_path));
    require(strip_run_fields(previous) == strip_run_fields(echo),
            "output directory " + root.string() + " holds a different experiment; choose another output_dir");
  }
  write_atomic(cfg_path, echo.dump(2) + "\n");

  const Dataset data = make_toy_dataset(cfg.dataset);
  RunSummary summary;
  std::vector<std::vector<metrics::ResultRow>> per_seed;
  std::vector<metrics::Series> acc_series, fgt_series;
  for (std::uint64_t seed : cfg.seeds) {
    SeedRun run{cfg, data, seed, seed_dir(root, seed), progress, summary};
    const auto ledger = run();
    per_seed.push_back(metrics::result_rows(ledger, seed));
    summary.seeds.push_back(seed);
  }
  const std::string agg = aggregate_csv(per_seed);
  summary.aggregate_csv = root / "aggregate.csv";
  write_atomic(summary.aggregate_csv, agg);

  metrics::Series a{cfg.name, {}, {}}, f = a;
  std::istringstream is(agg);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string t, n, am, as, fm;
    std::getline(ls, t, ',');
    std::getline(ls, n, ',');
    std::getline(ls, am, ',');
    std::getline(ls, as, ',');
    std::getline(ls, fm, ',');
    a.x.push_back(std::stod(t));
    a.y.push_back(std::stod(am));
    f.x.push_back(std::stod(t));
    f.y.push_back(fm == "nan" ? std::nan("") : std::stod(fm));
  }
  write_atomic(root / "curves.svg", metrics::curves_svg({a}, {f}));
  return summary;
}

namespace {

struct LoadedRun {
  std::string label;
  json shape;
  std::map<int, std::pair<double, double>> by_time;  // mean over seeds
};

LoadedRun load_run(const fs::path& dir) {
  require(fs::is_directory(dir), "run directory " + dir.string() + " does not exist");
  LoadedRun run;
  run.label = dir.filename().string();
  if (run.label.empty() || run.label == ".") run.label = fs::absolute(dir).parent_path().filename().string();
  require(fs::exists(dir / "config.json"), dir.string() + " has no config.json");
  const json cfg = json::parse(io::read_text(dir / "config.json"));
  run.shape = json{{"num_classes", cfg.at("dataset").at("num_classes")}, {"timeline", cfg.at("timeline")}};

  std::vector<fs::path> result_files;
  if (fs::exists(dir / "results.csv")) {
    result_files.push_back(dir / "results.csv");
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0 && fs::exists(e.path() / "results.csv"))
        result_files.push_back(e.path() / "results.csv");
    std::sort(result_files.begin(), result_files.end());
  }
  require(!result_files.empty(), dir.string() + " holds no results.csv (has the run finished?)");
  std::map<int, std::vector<std::pair<double, double>>> acc;
  for (const auto& p : result_files)
    for (const auto& r : metrics::parse_results_csv(io::read_text(p))) acc[r.time].push_back({r.avg_accuracy, r.avg_forgetting});
  for (const auto& [t, v] : acc) {
    require(v.size() == result_files.size(), dir.string() + ": time " + std::to_string(t) + " missing in some seeds");
    double a = 0, f = 0;
    for (const auto& [x, y] : v) a += x / v.size(), f += y / v.size();
    run.by_time[t] = {a, f};
  }
  return run;
}

std::string time_range(const LoadedRun& r) {
  return std::to_string(r.by_time.begin()->first) + ".." + std::to_string(r.by_time.rbegin()->first);
}

}  // namespace

CompareResult compare_runs(const std::vector<fs::path>& run_dirs) {
  require(!run_dirs.empty(), "compare needs at least one run directory");
  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  std::set<std::string> labels;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    if (!labels.insert(runs[k].label).second) runs[k].label += "#" + std::to_string(k);
    require(runs[k].shape == runs[0].shape, "timeline of " + run_dirs[k].string() + " (" + runs[k].shape.dump() +
                                                ") does not match " + run_dirs[0].string() + " (" +
                                                runs[0].shape.dump() + ")");
    std::set<int> a, b;
    for (const auto& [t, v] : runs[k].by_time) a.insert(t);
    for (const auto& [t, v] : runs[0].by_time) b.insert(t);
    require(a == b, "time ranges differ: " + runs[0].label + " covers " + time_range(runs[0]) + ", " + runs[k].label +
                        " covers " + time_range(runs[k]));
  }
  CompareResult out;
  std::ostringstream os;
  os << "run,time,avg_accuracy,avg_forgetting\n";
  for (const auto& [t, v] : runs[0].by_time)
    for (const auto& r : runs) os << r.label << ',' << t << ',' << fmt(r.by_time.at(t).first) << ',' << fmt(r.by_time.at(t).second) << '\n';
  out.table_csv = os.str();
  std::vector<metrics::Series> a, f;
  for (const auto& r : runs) {
    metrics::Series sa{r.label, {}, {}}, sf = sa;
    for (const auto& [t, v] : r.by_time) {
      sa.x.push_back(t);
      sa.y.push_back(v.first);
      sf.x.push_back(t);
      sf.y.push_back(v.second);
    }
    a.push_back(sa);
    f.push_back(sf);
  }
  out.curves_svg = metrics::curves_svg(a, f);
  return out;
}

GridExport export_samples(const fs::path& run_dir, int time_index, int per_class, std::uint64_t seed) {
  require(per_class >= 1, "per_class must be at least 1");
  require(time_index >= 1, "generators exist only for incremental phases (time index >= 1)");
  fs::path root = run_dir;
  if (!fs::exists(root / "timeline.jsonl")) {
    std::vector<fs::path> seeds;
    if (fs::is_directory(root))
      for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) seeds.push_back(e.path());
    require(!seeds.empty(), run_dir.string() + " is neither a seed tree nor an experiment root");
    std::sort(seeds.begin(), seeds.end());
    root = seeds.front();
  }
  const fs::path ckpt = phase_dir(root, time_index) / "generator_old.bin";
  require(fs::exists(ckpt), "no generator checkpoint for time " + std::to_string(time_index) + " at " + ckpt.string());
  protocol::TaskTimeline timeline;
  protocol::ExemplarStore store;
  protocol::load_timeline(root / "timeline.jsonl", timeline, store);
  auto g = gen::load_generator(ckpt);
  GridExport out;
  out.class_ids = timeline.seen_classes(time_index - 1);
  out.per_class = per_class;
  out.grid = gen::sample_grid(g, out.class_ids, per_class, seed);
  return out;
}

void write_grid(const fs::path& ppm_path, const GridExport& g) {
  if (ppm_path.has_parent_path()) fs::create_directories(ppm_path.parent_path());
  io::write_ppm(ppm_path, g.grid);
  fs::path side = ppm_path;
  side.replace_extension(".json");
  io::write_text(side, json{{"rows", g.class_ids},
                            {"per_class", g.per_class},
                            {"tiles", g.per_class * static_cast<int>(g.class_ids.size())},
                            {"label_column", true}}
                               .dump(2) +
                           "\n");
}

}  // namespace dtcil::exp
