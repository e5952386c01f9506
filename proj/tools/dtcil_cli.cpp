// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Talks to the library only through the C interface.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dtcil/dtcil.h"

namespace {

int fail(dtcil_status st) {
  std::cerr << "error (" << dtcil_status_name(st) << "): " << dtcil_last_error() << '\n';
  return static_cast<int>(st);
}

using Handle = std::unique_ptr<dtcil_experiment, decltype(&dtcil_experiment_free)>;

struct CommonFlags {
  std::string config;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::string device;
};

// Precedence: command-line flag, then environment, then config file.
dtcil_status open_experiment(const CommonFlags& f, Handle& out) {
  dtcil_experiment* raw = nullptr;
  if (auto st = dtcil_experiment_load(f.config.c_str(), &raw); st != DTCIL_OK) return st;
  out.reset(raw);
  if (auto st = dtcil_experiment_apply_env(raw); st != DTCIL_OK) return st;
  if (!f.output_dir.empty())
    if (auto st = dtcil_experiment_set_output_dir(raw, f.output_dir.c_str()); st != DTCIL_OK) return st;
  if (!f.device.empty())
    if (auto st = dtcil_experiment_set_device(raw, f.device.c_str()); st != DTCIL_OK) return st;
  if (f.seed) {
    const std::uint64_t s = *f.seed;
    if (auto st = dtcil_experiment_set_seeds(raw, &s, 1); st != DTCIL_OK) return st;
  }
  return dtcil_experiment_validate(raw);
}

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("-c,--config", f.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--output-dir", f.output_dir, "Output directory (overrides config and DTCIL_OUTPUT_DIR)");
  cmd->add_option("--seed", f.seed, "Run a single seed instead of the config's list");
  cmd->add_option("--device", f.device, "Compute device (overrides config and DTCIL_DEVICE)");
}

void print_progress(std::uint64_t seed, int time_index, const char* stage, void*) {
  std::fprintf(stderr, "[seed %llu] time %d: %s\n", static_cast<unsigned long long>(seed), time_index, stage);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental learning with dual teachers and data-free replay"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(dtcil_version()));

  CommonFlags run_flags, validate_flags;
  auto* run = app.add_subcommand("run", "Train every phase for every seed; completed phases are skipped");
  add_common(run, run_flags);
  bool quiet = false;
  run->add_flag("-q,--quiet", quiet, "No progress lines");

  auto* validate = app.add_subcommand("validate", "Check a config and print it with every default filled in");
  add_common(validate, validate_flags);

  CommonFlags sweep_flags;
  std::vector<double> alpha_values{1, 5, 10};
  bool sweep_run = false;
  auto* sweep = app.add_subcommand(
      "sweep-alpha", "Write one config per alpha0 value (default 1, 5, 10) next to the outputs; --run also trains them");
  add_common(sweep, sweep_flags);
  sweep->add_option("--values", alpha_values, "alpha0 values to try")->expected(1, -1);
  sweep->add_flag("--run", sweep_run, "Train every variant after writing its config");

  std::vector<std::string> runs;
  std::string compare_out = ".";
  auto* compare = app.add_subcommand("compare", "Align finished runs by time; writes compare.csv and compare.svg");
  compare->add_option("runs", runs, "Experiment or seed directories")->required()->check(CLI::ExistingDirectory);
  compare->add_option("-o,--output-dir", compare_out, "Where to write the table and curves");

  std::string export_run, export_out;
  int export_time = 1, per_class = 8;
  std::uint64_t export_seed = 0;
  auto* exp = app.add_subcommand("export-samples", "Write a PPM grid of generator samples for one phase");
  exp->add_option("run", export_run, "Experiment or seed directory")->required();
  exp->add_option("-t,--time", export_time, "Time index of the phase whose generator to sample")->required();
  exp->add_option("-n,--per-class", per_class, "Samples per class");
  exp->add_option("--seed", export_seed, "Noise seed");
  exp->add_option("-o,--out", export_out, "Output .ppm path")->required();

  CLI11_PARSE(app, argc, argv);

  if (*validate) {
    Handle h(nullptr, &dtcil_experiment_free);
    if (auto st = open_experiment(validate_flags, h); st != DTCIL_OK) return fail(st);
    char* text = nullptr;
    if (auto st = dtcil_experiment_config_json(h.get(), &text); st != DTCIL_OK) return fail(st);
    std::cout << text << '\n';
    dtcil_free_string(text);
    return 0;
  }
  if (*run) {
    Handle h(nullptr, &dtcil_experiment_free);
    if (auto st = open_experiment(run_flags, h); st != DTCIL_OK) return fail(st);
    int trained = 0;
    if (auto st = dtcil_experiment_run(h.get(), quiet ? nullptr : print_progress, nullptr, &trained); st != DTCIL_OK)
      return fail(st);
    char* dir = nullptr;
    dtcil_experiment_output_dir(h.get(), &dir);
    std::cout << "trained " << trained << " phase(s); results in " << dir << '\n';
    dtcil_free_string(dir);
    return 0;
  }
  if (*sweep) {
    Handle h(nullptr, &dtcil_experiment_free);
    if (auto st = open_experiment(sweep_flags, h); st != DTCIL_OK) return fail(st);
    for (double a : alpha_values) {
      dtcil_experiment* raw = nullptr;
      if (auto st = dtcil_experiment_alpha_variant(h.get(), a, &raw); st != DTCIL_OK) return fail(st);
      Handle variant(raw, &dtcil_experiment_free);
      char* dir = nullptr;
      char* text = nullptr;
      dtcil_experiment_output_dir(raw, &dir);
      if (auto st = dtcil_experiment_config_json(raw, &text); st != DTCIL_OK) return fail(st);
      const std::string path = std::string(dir) + ".json";
      dtcil_free_string(dir);
      std::error_code ec;
      std::filesystem::create_directories(std::filesystem::path(path).parent_path(), ec);
      std::ofstream(path) << text << '\n';
      dtcil_free_string(text);
      std::cout << "alpha0 " << a << ": " << path << '\n';
      if (sweep_run) {
        int trained = 0;
        if (auto st = dtcil_experiment_run(raw, print_progress, nullptr, &trained); st != DTCIL_OK) return fail(st);
      }
    }
    return 0;
  }
  if (*compare) {
    std::vector<const char*> ptrs;
    for (const auto& r : runs) ptrs.push_back(r.c_str());
    if (auto st = dtcil_compare(ptrs.data(), ptrs.size(), compare_out.c_str()); st != DTCIL_OK) return fail(st);
    std::cout << "wrote " << compare_out << "/compare.csv and compare.svg\n";
    return 0;
  }
  if (*exp) {
    if (auto st = dtcil_export_samples(export_run.c_str(), export_time, per_class, export_seed, export_out.c_str());
        st != DTCIL_OK)
      return fail(st);
    std::cout << "wrote " << export_out << '\n';
    return 0;
  }
  return 0;
}
