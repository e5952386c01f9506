// SPDX-License-Identifier: Apache-2.0

#include "dtcil/dtcil.h"

#include <cstring>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "dtcil/experiment.hpp"
#include "dtcil/io.hpp"

struct dtcil_experiment {
  dtcil::exp::ExperimentConfig cfg;
};

namespace {

thread_local std::string g_last_error;

// Configuration problems are reported as dtcil::Error with these prefixes or from parsing.
dtcil_status classify(const std::string& msg) {
  for (const char* io_hint : {"cannot read", "cannot write", "does not exist", "no generator checkpoint", "holds no",
                              "has no config", "is neither"})
    if (msg.find(io_hint) != std::string::npos) return DTCIL_ERR_IO;
  return DTCIL_ERR_RUNTIME;
}

template <typename F>
dtcil_status guarded(F&& f, dtcil_status dtcil_error_kind = DTCIL_ERR_RUNTIME) {
  g_last_error.clear();
  try {
    f();
    return DTCIL_OK;
  } catch (const dtcil::Error& e) {
    g_last_error = e.what();
    return dtcil_error_kind == DTCIL_ERR_RUNTIME ? classify(g_last_error) : dtcil_error_kind;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return DTCIL_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DTCIL_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return DTCIL_ERR_RUNTIME;
  }
}

dtcil_status invalid(const char* what) {
  g_last_error = what;
  return DTCIL_ERR_INVALID_ARGUMENT;
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* dtcil_version(void) { return "0.1.0"; }

const char* dtcil_last_error(void) { return g_last_error.c_str(); }

const char* dtcil_status_name(dtcil_status s) {
  switch (s) {
    case DTCIL_OK: return "ok";
    case DTCIL_ERR_INVALID_ARGUMENT: return "invalid argument";
    case DTCIL_ERR_CONFIG: return "config error";
    case DTCIL_ERR_IO: return "io error";
    case DTCIL_ERR_RUNTIME: return "runtime error";
  }
  return "unknown status";
}

void dtcil_free_string(char* s) { delete[] s; }

dtcil_status dtcil_experiment_load(const char* config_path, dtcil_experiment** out) {
  if (!config_path || !out) return invalid("config_path and out must not be null");
  *out = nullptr;
  if (!std::filesystem::exists(config_path)) {
    g_last_error = std::string("config file ") + config_path + " does not exist";
    return DTCIL_ERR_IO;
  }
  std::string text;
  if (auto st = guarded([&] { text = dtcil::io::read_text(config_path); }); st != DTCIL_OK) return st;
  return dtcil_experiment_parse(text.c_str(), out);
}

dtcil_status dtcil_experiment_parse(const char* config_json, dtcil_experiment** out) {
  if (!config_json || !out) return invalid("config_json and out must not be null");
  *out = nullptr;
  return guarded(
      [&] {
        auto e = std::make_unique<dtcil_experiment>();
        e->cfg = dtcil::exp::parse_config(config_json);
        e->cfg.validate();
        *out = e.release();
      },
      DTCIL_ERR_CONFIG);
}

void dtcil_experiment_free(dtcil_experiment* e) { delete e; }

dtcil_status dtcil_experiment_apply_env(dtcil_experiment* e) {
  if (!e) return invalid("experiment handle is null");
  return guarded([&] { dtcil::exp::apply_env_overrides(e->cfg); });
}

dtcil_status dtcil_experiment_set_output_dir(dtcil_experiment* e, const char* dir) {
  if (!e || !dir || !*dir) return invalid("experiment handle and a non-empty directory are required");
  e->cfg.output_dir = dir;
  return DTCIL_OK;
}

dtcil_status dtcil_experiment_set_device(dtcil_experiment* e, const char* device) {
  if (!e || !device) return invalid("experiment handle and device must not be null");
  e->cfg.device = device;
  return DTCIL_OK;
}

dtcil_status dtcil_experiment_set_seeds(dtcil_experiment* e, const uint64_t* seeds, size_t n) {
  if (!e || !seeds || n == 0) return invalid("experiment handle and at least one seed are required");
  e->cfg.seeds.assign(seeds, seeds + n);
  return DTCIL_OK;
}

dtcil_status dtcil_experiment_validate(const dtcil_experiment* e) {
  if (!e) return invalid("experiment handle is null");
  return guarded([&] { e->cfg.validate(); }, DTCIL_ERR_CONFIG);
}

dtcil_status dtcil_experiment_config_json(const dtcil_experiment* e, char** out_json) {
  if (!e || !out_json) return invalid("experiment handle and out_json must not be null");
  return guarded([&] { *out_json = dup_string(nlohmann::json(e->cfg).dump(2)); });
}

dtcil_status dtcil_experiment_output_dir(const dtcil_experiment* e, char** out_dir) {
  if (!e || !out_dir) return invalid("experiment handle and out_dir must not be null");
  *out_dir = dup_string(e->cfg.output_dir);
  return DTCIL_OK;
}

dtcil_status dtcil_experiment_alpha_variant(const dtcil_experiment* e, double alpha0, dtcil_experiment** out) {
  if (!e || !out) return invalid("experiment handle and out must not be null");
  *out = nullptr;
  if (!(alpha0 > 0)) return invalid("alpha0 must be positive");
  return guarded(
      [&] {
        auto v = std::make_unique<dtcil_experiment>();
        v->cfg = dtcil::exp::alpha_sweep(e->cfg, {alpha0}).front();
        *out = v.release();
      },
      DTCIL_ERR_CONFIG);
}

dtcil_status dtcil_experiment_run(dtcil_experiment* e, dtcil_progress_fn progress, void* user, int* phases_trained) {
  if (!e) return invalid("experiment handle is null");
  if (auto st = dtcil_experiment_validate(e); st != DTCIL_OK) return st;
  return guarded([&] {
    dtcil::exp::ProgressFn fn;
    if (progress)
      fn = [&](const dtcil::exp::Progress& p) { progress(p.seed, p.time_index, p.stage.c_str(), user); };
    const auto summary = dtcil::exp::run_experiment(e->cfg, fn);
    if (phases_trained) *phases_trained = summary.phases_trained;
  });
}

dtcil_status dtcil_compare(const char* const* run_dirs, size_t n, const char* out_dir) {
  if (!run_dirs || n == 0 || !out_dir) return invalid("at least one run directory and an output directory are required");
  for (size_t k = 0; k < n; ++k)
    if (!run_dirs[k]) return invalid("run directory entry is null");
  return guarded([&] {
    std::vector<std::filesystem::path> dirs(run_dirs, run_dirs + n);
    const auto res = dtcil::exp::compare_runs(dirs);
    std::filesystem::create_directories(out_dir);
    dtcil::io::write_text(std::filesystem::path(out_dir) / "compare.csv", res.table_csv);
    dtcil::io::write_text(std::filesystem::path(out_dir) / "compare.svg", res.curves_svg);
  });
}

dtcil_status dtcil_export_samples(const char* run_dir, int time_index, int per_class, uint64_t seed,
                                  const char* out_ppm) {
  if (!run_dir || !out_ppm) return invalid("run_dir and out_ppm must not be null");
  if (per_class < 1) return invalid("per_class must be at least 1");
  return guarded([&] {
    const auto grid = dtcil::exp::export_samples(run_dir, time_index, per_class, seed);
    dtcil::exp::write_grid(out_ppm, grid);
  });
}

}  // extern "C"
