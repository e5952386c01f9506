// SPDX-License-Identifier: Apache-2.0

#include "dtcil/protocol.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

namespace dtcil::protocol {

using nlohmann::json;

TaskTimeline::TaskTimeline(std::vector<TaskSpec> tasks, std::uint64_t seed) : tasks_(std::move(tasks)), seed_(seed) {
  validate();
}

void TaskTimeline::validate() const {
  require(!tasks_.empty(), "timeline has no tasks");
  std::set<int> seen;
  for (std::size_t i = 0; i < tasks_.size(); ++i) {
    const auto& t = tasks_[i];
    require(t.time_index == static_cast<int>(i), "task time indices must be 0..n in order");
    require(!t.classes.empty(), "task " + std::to_string(i) + " has no classes");
    for (int c : t.classes) require(seen.insert(c).second, "class " + std::to_string(c) + " appears in two tasks");
  }
}

const TaskSpec& TaskTimeline::task(int i) const {
  require(i >= 0 && i < size(), "time index " + std::to_string(i) + " outside timeline");
  return tasks_[static_cast<std::size_t>(i)];
}

std::vector<int> TaskTimeline::seen_classes(int i) const {
  std::vector<int> out;
  for (int t = 0; t <= i; ++t) {
    const auto& cs = task(t).classes;
    out.insert(out.end(), cs.begin(), cs.end());
  }
  return out;
}

int TaskTimeline::origin_of(int class_id) const {
  for (const auto& t : tasks_)
    if (std::find(t.classes.begin(), t.classes.end(), class_id) != t.classes.end()) return t.time_index;
  return -1;
}

void TaskTimeline::attach_splits(const Dataset& data) {
  for (auto& t : tasks_) {
    const std::set<int> cls(t.classes.begin(), t.classes.end());
    t.train_split.clear();
    t.test_split.clear();
    for (int i = 0; i < data.train.size(); ++i)
      if (cls.count(data.train.labels[i])) t.train_split.push_back({"train", i});
    for (int i = 0; i < data.test.size(); ++i)
      if (cls.count(data.test.labels[i])) t.test_split.push_back({"test", i});
  }
}

TaskTimeline build_timeline(const std::vector<int>& class_ids, int base_count, int increment_size,
                            std::uint64_t seed) {
  require(base_count >= 1, "base_count must be at least 1");
  require(increment_size >= 1, "increment_size must be at least 1");
  const int total = static_cast<int>(class_ids.size());
  require(base_count <= total, "base_count " + std::to_string(base_count) + " exceeds " + std::to_string(total) +
                                   " classes");
  const int rest = total - base_count;
  if (rest % increment_size != 0) {
    throw Error("classes do not divide evenly: " + std::to_string(rest) + " classes after the base task leave remainder " +
                std::to_string(rest % increment_size) + " for increment size " + std::to_string(increment_size));
  }
  std::vector<int> perm = class_ids;
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<TaskSpec> tasks;
  TaskSpec base;
  base.time_index = 0;
  base.classes.assign(perm.begin(), perm.begin() + base_count);
  tasks.push_back(std::move(base));
  for (int at = base_count, t = 1; at < total; at += increment_size, ++t) {
    TaskSpec s;
    s.time_index = t;
    s.classes.assign(perm.begin() + at, perm.begin() + at + increment_size);
    tasks.push_back(std::move(s));
  }
  return TaskTimeline(std::move(tasks), seed);
}

std::vector<SampleRef> select_exemplars(const std::vector<SampleRef>& candidates, const Dataset& data, int class_id,
                                        int count, std::uint64_t seed) {
  require(count >= 0, "exemplar count must be non-negative");
  std::vector<SampleRef> pool;
  for (const auto& r : candidates)
    if (data.split(r.split).labels.at(static_cast<std::size_t>(r.index)) == class_id) pool.push_back(r);
  require(count <= static_cast<int>(pool.size()), "requested " + std::to_string(count) + " exemplars of class " +
                                                      std::to_string(class_id) + " but only " +
                                                      std::to_string(pool.size()) + " samples exist");
  std::mt19937_64 rng(seed ^ (0x5851F42D4C957F2DULL * static_cast<std::uint64_t>(class_id + 1)));
  std::vector<SampleRef> out;
  out.reserve(static_cast<std::size_t>(count));
  std::sample(pool.begin(), pool.end(), std::back_inserter(out), count, rng);
  return out;
}

ExemplarStore::ExemplarStore(int capacity_per_class) : capacity_(capacity_per_class) {
  require(capacity_per_class >= 0, "exemplar capacity must be non-negative");
}

void ExemplarStore::add(int class_id, std::vector<SampleRef> refs, const Dataset* data) {
  require(static_cast<int>(refs.size()) <= capacity_, "exemplar list for class " + std::to_string(class_id) +
                                                          " exceeds capacity " + std::to_string(capacity_));
  if (data) {
    for (const auto& r : refs) {
      const auto& s = data->split(r.split);
      require(r.index >= 0 && r.index < s.size() && s.labels[r.index] == class_id,
              "exemplar reference does not resolve to a sample of class " + std::to_string(class_id));
    }
  }
  per_class_[class_id] = std::move(refs);
}

const std::vector<SampleRef>& ExemplarStore::of(int class_id) const {
  static const std::vector<SampleRef> kEmpty;
  auto it = per_class_.find(class_id);
  return it == per_class_.end() ? kEmpty : it->second;
}

bool ExemplarStore::empty() const { return total() == 0; }

int ExemplarStore::total() const {
  int n = 0;
  for (const auto& [c, v] : per_class_) n += static_cast<int>(v.size());
  return n;
}

BatchComposition compose_batch(bool has_exemplars, int n_generators, int batch_size) {
  require(batch_size > 0 && batch_size % 4 == 0,
          "batch size " + std::to_string(batch_size) + " must be a positive multiple of 4");
  require(n_generators >= 0 && n_generators <= 2, "number of generators must be 0, 1 or 2");
  const int b = batch_size, h = b / 2, q = b / 4;
  if (has_exemplars) {
    switch (n_generators) {
      case 0: return {h, 0, h, 0};
      case 1: return {h, 0, q, q};
      default: return {q, q, q, q};
    }
  }
  switch (n_generators) {
    case 0: return {b, 0, 0, 0};
    case 1: return {h, 0, 0, h};
    default: return {q, q, 0, h};
  }
}

void save_timeline(const std::filesystem::path& path, const TaskTimeline& timeline, const ExemplarStore& store) {
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os << json{{"record", "timeline"},
             {"seed", timeline.seed()},
             {"tasks", timeline.size()},
             {"capacity_per_class", store.capacity_per_class()}}
            .dump()
     << '\n';
  for (const auto& t : timeline.tasks()) {
    json ex = json::object();
    for (int c : t.classes) {
      json refs = json::array();
      for (const auto& r : store.of(c)) refs.push_back({r.split, r.index});
      ex[std::to_string(c)] = refs;
    }
    os << json{{"record", "task"}, {"time_index", t.time_index}, {"classes", t.classes}, {"exemplars", ex}}.dump()
       << '\n';
  }
}

void load_timeline(const std::filesystem::path& path, TaskTimeline& timeline, ExemplarStore& store) {
  std::ifstream is(path);
  require(is.good(), "cannot read " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "empty timeline file " + path.string());
  const json head = json::parse(line);
  require(head.value("record", "") == "timeline", "timeline file must start with a header record");
  ExemplarStore st(head.at("capacity_per_class").get<int>());
  std::vector<TaskSpec> tasks;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    TaskSpec t;
    t.time_index = rec.at("time_index").get<int>();
    t.classes = rec.at("classes").get<std::vector<int>>();
    for (const auto& [key, refs] : rec.at("exemplars").items()) {
      std::vector<SampleRef> v;
      for (const auto& r : refs) v.push_back({r.at(0).get<std::string>(), r.at(1).get<int>()});
      if (!v.empty()) st.add(std::stoi(key), std::move(v));
    }
    tasks.push_back(std::move(t));
  }
  require(static_cast<int>(tasks.size()) == head.at("tasks").get<int>(), "timeline file is truncated");
  timeline = TaskTimeline(std::move(tasks), head.at("seed").get<std::uint64_t>());
  store = std::move(st);
}

}  // namespace dtcil::protocol
