// SPDX-License-Identifier: Apache-2.0
//
// Per-class accuracy bookkeeping across the task sequence, average accuracy and
// average forgetting, and result tables / curves.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcil/backbone.hpp"
#include "dtcil/protocol.hpp"

namespace dtcil::metrics {

/// A_i(c) for every time i and every class seen by then, plus each class's time of origin.
class AccuracyLedger {
 public:
  AccuracyLedger() = default;
  explicit AccuracyLedger(std::map<int, int> class_origin);
  static AccuracyLedger from_timeline(const protocol::TaskTimeline& t);

  /// Stores row i; it must hold exactly the classes seen by time i, values in [0, 1].
  void record(int time, const std::map<int, double>& row);
  bool has_row(int time) const { return rows_.count(time) > 0; }
  const std::map<int, double>& row(int time) const;
  double at(int time, int class_id) const;
  int origin(int class_id) const;
  std::vector<int> classes_seen_by(int time) const;
  int last_time() const { return rows_.empty() ? -1 : rows_.rbegin()->first; }
  const std::map<int, int>& class_origin() const { return origin_; }
  const std::map<int, std::map<int, double>>& rows() const { return rows_; }

 private:
  std::map<int, int> origin_;
  std::map<int, std::map<int, double>> rows_;
};

void to_json(nlohmann::json& j, const AccuracyLedger& l);
void from_json(const nlohmann::json& j, AccuracyLedger& l);

/// Top-1 accuracy per class on one split; prediction is the argmax over all head classes.
std::map<int, double> per_class_accuracy(model::Classifier& m, const Dataset& data, const std::string& split,
                                         const std::vector<int>& classes);

/// Test accuracy for every class seen by time i.
std::map<int, double> evaluate_model(model::Classifier& m, const Dataset& data, const protocol::TaskTimeline& t, int i);

double average_accuracy(const AccuracyLedger& ledger, int i);
/// Mean over classes seen before time i of (best accuracy from origin to i-1) minus A_i(c); not clipped.
double average_forgetting(const AccuracyLedger& ledger, int i);

struct ResultRow {
  int time = 0;
  std::uint64_t seed = 0;
  double avg_accuracy = 0;
  double avg_forgetting = 0;  // NaN at time 0
};

std::vector<ResultRow> result_rows(const AccuracyLedger& ledger, std::uint64_t seed);
inline constexpr const char* kResultsHeader = "time,seed,avg_accuracy,avg_forgetting";
std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Two stacked line charts (average accuracy and average forgetting against time) as SVG.
std::string curves_svg(const std::vector<Series>& accuracy, const std::vector<Series>& forgetting);

}  // namespace dtcil::metrics
