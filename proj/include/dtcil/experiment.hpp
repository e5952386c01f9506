// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiments: the full base + increments loop per seed, resumable
// artifact trees, multi-run comparison and generator sample export.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcil/backbone.hpp"
#include "dtcil/dataset.hpp"
#include "dtcil/generator.hpp"
#include "dtcil/metrics.hpp"
#include "dtcil/trainer.hpp"

namespace dtcil::exp {

enum class Scenario { Conventional, DataLimited };

struct TimelineParams {
  int base_classes = 5;
  int increment = 5;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ToyDatasetConfig dataset;
  TimelineParams timeline;
  Scenario scenario = Scenario::Conventional;
  int n_teachers = 2;
  int n_generators = 1;
  int n_data = -1;
  int n_reserved = 0;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "runs/experiment";
  std::string device = "cpu";
  model::BackboneConfig backbone;
  gen::GeneratorConfig generator;
  train::PhaseConfig base;            // base model f_0
  train::PhaseConfig second_teacher;  // h_i
  train::PhaseConfig increment;       // every incremental phase
  /// Per-time-index partial overrides of `increment`, keyed by the time index.
  std::map<int, nlohmann::json> phase_overrides;

  int num_times() const;
  /// Fully resolved settings for phase i of one seed (N_t, N_g, N_D, N_R and the seed filled in).
  train::PhaseConfig phase(int i, std::uint64_t seed) const;
  /// Checks every precondition that training would hit, naming the first violation.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses a config, fills defaults and validates it.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text);

/// Only these two settings may come from the environment.
inline constexpr const char* kEnvOutputDir = "DTCIL_OUTPUT_DIR";
inline constexpr const char* kEnvDevice = "DTCIL_DEVICE";
void apply_env_overrides(ExperimentConfig& c);

struct Progress {
  std::uint64_t seed = 0;
  int time_index = 0;
  std::string stage;  // "base", "second_teacher", "generator", "increment", "skip"
};
using ProgressFn = std::function<void(const Progress&)>;

struct RunSummary {
  std::vector<std::uint64_t> seeds;
  int phases_trained = 0;
  int phases_skipped = 0;
  std::filesystem::path aggregate_csv;
};

/// Directory of one seed inside an experiment tree.
std::filesystem::path seed_dir(const std::filesystem::path& root, std::uint64_t seed);
std::filesystem::path phase_dir(const std::filesystem::path& seed_root, int time_index);

/// One config per alpha0 value for a manual search; each writes to <output_dir>/alpha0_<value>.
/// Per-phase overrides that set alpha0 are replaced as well.
std::vector<ExperimentConfig> alpha_sweep(const ExperimentConfig& cfg, const std::vector<double>& alpha0_values);

/// Runs every seed; completed phases found on disk are loaded instead of retrained.
RunSummary run_experiment(const ExperimentConfig& cfg, const ProgressFn& progress = {});

/// Mean and sample stddev over seeds, one row per time.
inline constexpr const char* kAggregateHeader =
    "time,n_seeds,avg_accuracy_mean,avg_accuracy_std,avg_forgetting_mean,avg_forgetting_std";
std::string aggregate_csv(const std::vector<std::vector<metrics::ResultRow>>& per_seed);

struct CompareResult {
  std::string table_csv;  // run,time,avg_accuracy,avg_forgetting
  std::string curves_svg;
};

/// Aligns runs (experiment roots or single seed trees) by time; mismatched timelines are rejected.
CompareResult compare_runs(const std::vector<std::filesystem::path>& run_dirs);

struct GridExport {
  std::vector<int> class_ids;  // row order
  int per_class = 0;
  Tensor grid;  // [3, rows*H, per_class*W]
};

/// Grid of the generator used at `time_index` (it replays the classes seen before that time).
GridExport export_samples(const std::filesystem::path& run_dir, int time_index, int per_class, std::uint64_t seed);
/// Writes the grid as PPM plus a JSON sidecar naming the class of each row.
void write_grid(const std::filesystem::path& ppm_path, const GridExport& g);

}  // namespace dtcil::exp
