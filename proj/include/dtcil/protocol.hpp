// SPDX-License-Identifier: Apache-2.0
//
// Incremental task sequence, exemplar reservation and batch-composition policy.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dtcil/dataset.hpp"

namespace dtcil::protocol {

/// A sample addressed by split name and index, so stores persist without pixel copies.
struct SampleRef {
  std::string split;
  int index = 0;
  bool operator==(const SampleRef&) const = default;
};

struct TaskSpec {
  int time_index = 0;
  std::vector<int> classes;
  std::vector<SampleRef> train_split;
  std::vector<SampleRef> test_split;
};

class TaskTimeline {
 public:
  TaskTimeline() = default;
  TaskTimeline(std::vector<TaskSpec> tasks, std::uint64_t seed);

  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  const TaskSpec& task(int i) const;
  int size() const { return static_cast<int>(tasks_.size()); }
  std::uint64_t seed() const { return seed_; }

  /// Classes seen up to and including time i, in task order.
  std::vector<int> seen_classes(int i) const;
  /// Time index of the task that introduced `class_id`, or -1.
  int origin_of(int class_id) const;

  /// Fills each task's train/test references from the dataset labels.
  void attach_splits(const Dataset& data);

 private:
  void validate() const;
  std::vector<TaskSpec> tasks_;
  std::uint64_t seed_ = 0;
};

/// Splits `class_ids` (seeded permutation) into a base task and equal increments.
TaskTimeline build_timeline(const std::vector<int>& class_ids, int base_count, int increment_size, std::uint64_t seed);

/// Seeded uniform subset without replacement of the samples of `class_id` in `candidates`.
std::vector<SampleRef> select_exemplars(const std::vector<SampleRef>& candidates, const Dataset& data, int class_id,
                                        int count, std::uint64_t seed);

class ExemplarStore {
 public:
  explicit ExemplarStore(int capacity_per_class = 0);

  int capacity_per_class() const { return capacity_; }
  void add(int class_id, std::vector<SampleRef> refs, const Dataset* data = nullptr);
  const std::vector<SampleRef>& of(int class_id) const;
  const std::map<int, std::vector<SampleRef>>& all() const { return per_class_; }
  bool empty() const;
  int total() const;

 private:
  int capacity_;
  std::map<int, std::vector<SampleRef>> per_class_;
};

struct BatchComposition {
  int new_original = 0;
  int new_synthetic = 0;
  int old_exemplar = 0;
  int old_synthetic = 0;

  int total() const { return new_original + new_synthetic + old_exemplar + old_synthetic; }
  bool operator==(const BatchComposition&) const = default;
};

/// The mixing table: rows for (exemplars present?) x (0, 1 or 2 generators).
BatchComposition compose_batch(bool has_exemplars, int n_generators, int batch_size);

/// Writes one JSON record per line: a header, then one record per task with its exemplar references.
void save_timeline(const std::filesystem::path& path, const TaskTimeline& timeline, const ExemplarStore& store);
void load_timeline(const std::filesystem::path& path, TaskTimeline& timeline, ExemplarStore& store);

}  // namespace dtcil::protocol
