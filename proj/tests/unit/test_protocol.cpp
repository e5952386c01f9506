// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "dtcil/protocol.hpp"

using namespace dtcil;
using namespace dtcil::protocol;

namespace {

std::vector<int> iota_ids(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

const Dataset& small_data() {
  static const Dataset d = [] {
    ToyDatasetConfig cfg;
    cfg.image_size = 8;
    cfg.train_per_class = 30;
    cfg.test_per_class = 5;
    return make_toy_dataset(cfg);
  }();
  return d;
}

}  // namespace

TEST_CASE("timeline sizes") {
  auto t = build_timeline(iota_ids(100), 50, 10, 1);
  REQUIRE(t.size() == 6);
  CHECK(t.task(0).classes.size() == 50);
  for (int i = 1; i < 6; ++i) CHECK(t.task(i).classes.size() == 10);
  CHECK(build_timeline(iota_ids(1000), 500, 100, 1).size() == 6);
  CHECK(build_timeline(iota_ids(10), 5, 5, 1).size() == 2);
}

TEST_CASE("timeline rejects an uneven split and reports the remainder") {
  try {
    build_timeline(iota_ids(10), 5, 3, 1);
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("remainder") != std::string::npos);
  }
}

TEST_CASE("timeline is deterministic and disjoint") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto a = build_timeline(iota_ids(20), 8, 4, seed);
    auto b = build_timeline(iota_ids(20), 8, 4, seed);
    std::set<int> seen;
    for (int i = 0; i < a.size(); ++i) {
      CHECK(a.task(i).classes == b.task(i).classes);
      for (int c : a.task(i).classes) CHECK(seen.insert(c).second);
    }
    CHECK(seen.size() == 20);
    CHECK(a.seen_classes(1).size() == 12);
    CHECK(a.origin_of(a.task(2).classes[0]) == 2);
  }
}

TEST_CASE("exemplar selection") {
  const auto& d = small_data();
  auto t = build_timeline(iota_ids(10), 5, 5, 3);
  t.attach_splits(d);
  const int c = t.task(0).classes[0];
  auto a = select_exemplars(t.task(0).train_split, d, c, 20, 9);
  auto b = select_exemplars(t.task(0).train_split, d, c, 20, 9);
  CHECK(a == b);
  std::set<int> idx;
  for (const auto& r : a) {
    CHECK(d.train.labels[r.index] == c);
    idx.insert(r.index);
  }
  CHECK(idx.size() == 20);
  CHECK(select_exemplars(t.task(0).train_split, d, c, 0, 9).empty());
  CHECK_THROWS_AS(select_exemplars(t.task(0).train_split, d, c, 31, 9), Error);
}

TEST_CASE("exemplar store capacity and label checks") {
  const auto& d = small_data();
  ExemplarStore store(2);
  auto refs = select_exemplars({}, d, 1, 0, 0);
  std::vector<SampleRef> two;
  for (int i : d.indices_of("train", 1)) {
    if (two.size() == 2) break;
    two.push_back({"train", i});
  }
  store.add(1, two, &d);
  CHECK(store.total() == 2);
  CHECK_THROWS_AS(store.add(2, {two[0]}, &d), Error);
  two.push_back(two[0]);
  CHECK_THROWS_AS(store.add(1, two, &d), Error);
}

TEST_CASE("batch composition table") {
  for (int b : {4, 128, 256}) {
    CHECK(compose_batch(true, 0, b) == BatchComposition{b / 2, 0, b / 2, 0});
    CHECK(compose_batch(true, 1, b) == BatchComposition{b / 2, 0, b / 4, b / 4});
    CHECK(compose_batch(true, 2, b) == BatchComposition{b / 4, b / 4, b / 4, b / 4});
    CHECK(compose_batch(false, 0, b) == BatchComposition{b, 0, 0, 0});
    CHECK(compose_batch(false, 1, b) == BatchComposition{b / 2, 0, 0, b / 2});
    CHECK(compose_batch(false, 2, b) == BatchComposition{b / 4, b / 4, 0, b / 2});
  }
  CHECK(compose_batch(true, 1, 256) == BatchComposition{128, 0, 64, 64});
  CHECK(compose_batch(false, 0, 128) == BatchComposition{128, 0, 0, 0});
  CHECK(compose_batch(true, 2, 4) == BatchComposition{1, 1, 1, 1});
  CHECK_THROWS_AS(compose_batch(true, 1, 6), Error);
  CHECK_THROWS_AS(compose_batch(true, 3, 8), Error);
}

TEST_CASE("batch composition properties") {
  for (int b = 4; b <= 512; b += 4)
    for (bool ex : {false, true})
      for (int g = 0; g <= 2; ++g) {
        auto c = compose_batch(ex, g, b);
        CHECK(c.total() == b);
        if (!ex) CHECK(c.old_exemplar == 0);
        if (g == 0) CHECK(c.new_synthetic + c.old_synthetic == 0);
      }
}

TEST_CASE("timeline and exemplar store round-trip") {
  const auto& d = small_data();
  auto t = build_timeline(iota_ids(10), 4, 3, 5);
  t.attach_splits(d);
  ExemplarStore store(3);
  for (int c : t.task(0).classes) store.add(c, select_exemplars(t.task(0).train_split, d, c, 3, 1), &d);
  auto path = std::filesystem::temp_directory_path() / "dtcil_timeline_test.jsonl";
  save_timeline(path, t, store);
  TaskTimeline t2;
  ExemplarStore s2;
  load_timeline(path, t2, s2);
  REQUIRE(t2.size() == t.size());
  for (int i = 0; i < t.size(); ++i) CHECK(t2.task(i).classes == t.task(i).classes);
  CHECK(t2.seed() == t.seed());
  CHECK(s2.capacity_per_class() == 3);
  CHECK(s2.all() == store.all());
  std::filesystem::remove(path);
}
