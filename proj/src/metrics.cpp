// SPDX-License-Identifier: Apache-2.0

#include "dtcil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace dtcil::metrics {

using nlohmann::json;
using nn::Mode;

AccuracyLedger::AccuracyLedger(std::map<int, int> class_origin) : origin_(std::move(class_origin)) {
  for (const auto& [c, t] : origin_) require(t >= 0, "class " + std::to_string(c) + " has a negative origin");
}

AccuracyLedger AccuracyLedger::from_timeline(const protocol::TaskTimeline& t) {
  std::map<int, int> origin;
  for (const auto& task : t.tasks())
    for (int c : task.classes) origin[c] = task.time_index;
  return AccuracyLedger(std::move(origin));
}

std::vector<int> AccuracyLedger::classes_seen_by(int time) const {
  std::vector<int> out;
  for (const auto& [c, t] : origin_)
    if (t <= time) out.push_back(c);
  return out;
}

void AccuracyLedger::record(int time, const std::map<int, double>& row) {
  require(time >= 0, "time index must be non-negative");
  const auto expected = classes_seen_by(time);
  require(row.size() == expected.size(), "accuracy row " + std::to_string(time) + " must hold " +
                                             std::to_string(expected.size()) + " classes, got " +
                                             std::to_string(row.size()));
  for (int c : expected) {
    auto it = row.find(c);
    require(it != row.end(), "accuracy row " + std::to_string(time) + " misses class " + std::to_string(c));
    require(std::isfinite(it->second) && it->second >= 0.0 && it->second <= 1.0,
            "accuracy of class " + std::to_string(c) + " must lie in [0, 1]");
  }
  rows_[time] = row;
}

const std::map<int, double>& AccuracyLedger::row(int time) const {
  auto it = rows_.find(time);
  require(it != rows_.end(), "no accuracy row recorded for time " + std::to_string(time));
  return it->second;
}

double AccuracyLedger::at(int time, int class_id) const {
  const auto& r = row(time);
  auto it = r.find(class_id);
  require(it != r.end(), "class " + std::to_string(class_id) + " not seen by time " + std::to_string(time));
  return it->second;
}

int AccuracyLedger::origin(int class_id) const {
  auto it = origin_.find(class_id);
  require(it != origin_.end(), "unknown class " + std::to_string(class_id));
  return it->second;
}

void to_json(json& j, const AccuracyLedger& l) {
  json origin = json::object(), rows = json::object();
  for (const auto& [c, t] : l.class_origin()) origin[std::to_string(c)] = t;
  for (const auto& [t, row] : l.rows()) {
    json r = json::object();
    for (const auto& [c, a] : row) r[std::to_string(c)] = a;
    rows[std::to_string(t)] = r;
  }
  j = json{{"class_origin", origin}, {"rows", rows}};
}

void from_json(const json& j, AccuracyLedger& l) {
  std::map<int, int> origin;
  for (const auto& [k, v] : j.at("class_origin").items()) origin[std::stoi(k)] = v.get<int>();
  l = AccuracyLedger(std::move(origin));
  for (const auto& [k, v] : j.at("rows").items()) {
    std::map<int, double> row;
    for (const auto& [c, a] : v.items()) row[std::stoi(c)] = a.get<double>();
    l.record(std::stoi(k), row);
  }
}

std::map<int, double> per_class_accuracy(model::Classifier& m, const Dataset& data, const std::string& split,
                                         const std::vector<int>& classes) {
  const auto& s = data.split(split);
  std::map<int, long> hit, total;
  const std::set<int> wanted(classes.begin(), classes.end());
  std::vector<int> idx;
  for (int k = 0; k < s.size(); ++k)
    if (wanted.count(s.labels[k])) idx.push_back(k);
  constexpr int kChunk = 256;
  for (std::size_t b = 0; b < idx.size(); b += kChunk) {
    const std::vector<int> part(idx.begin() + b, idx.begin() + std::min(idx.size(), b + kChunk));
    const auto out = m.forward(s.gather(part), Mode::Eval);
    const int nc = out.logits.dim(1);
    for (std::size_t r = 0; r < part.size(); ++r) {
      const float* row = out.logits.data() + r * nc;
      const int pred = static_cast<int>(std::max_element(row, row + nc) - row);
      const int label = s.labels[part[r]];
      ++total[label];
      if (m.head.class_ids()[pred] == label) ++hit[label];
    }
  }
  std::map<int, double> acc;
  for (int c : classes) {
    require(total[c] > 0, "no " + split + " samples for class " + std::to_string(c));
    acc[c] = static_cast<double>(hit[c]) / total[c];
  }
  return acc;
}

std::map<int, double> evaluate_model(model::Classifier& m, const Dataset& data, const protocol::TaskTimeline& t,
                                     int i) {
  return per_class_accuracy(m, data, "test", t.seen_classes(i));
}

double average_accuracy(const AccuracyLedger& ledger, int i) {
  const auto& r = ledger.row(i);
  require(r.size() == ledger.classes_seen_by(i).size(), "accuracy row " + std::to_string(i) + " is incomplete");
  double s = 0;
  for (const auto& [c, a] : r) s += a;
  return s / static_cast<double>(r.size());
}

double average_forgetting(const AccuracyLedger& ledger, int i) {
  require(i >= 1, "forgetting is undefined at the first time step");
  const auto old = ledger.classes_seen_by(i - 1);
  require(!old.empty(), "no classes seen before time " + std::to_string(i));
  double s = 0;
  for (int c : old) {
    double best = -std::numeric_limits<double>::infinity();
    for (int t = ledger.origin(c); t <= i - 1; ++t) best = std::max(best, ledger.at(t, c));
    s += best - ledger.at(i, c);
  }
  return s / static_cast<double>(old.size());
}

std::vector<ResultRow> result_rows(const AccuracyLedger& ledger, std::uint64_t seed) {
  std::vector<ResultRow> out;
  for (const auto& [t, row] : ledger.rows()) {
    ResultRow r;
    r.time = t;
    r.seed = seed;
    r.avg_accuracy = average_accuracy(ledger, t);
    r.avg_forgetting = t == 0 ? std::numeric_limits<double>::quiet_NaN() : average_forgetting(ledger, t);
    out.push_back(r);
  }
  return out;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << kResultsHeader << '\n' << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.time << ',' << r.seed << ',' << r.avg_accuracy << ',';
    if (std::isnan(r.avg_forgetting))
      os << "nan";
    else
      os << r.avg_forgetting;
    os << '\n';
  }
  return os.str();
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == kResultsHeader, "results table has an unexpected header");
  std::vector<ResultRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& x : f) require(static_cast<bool>(std::getline(ls, x, ',')), "malformed results line: " + line);
    ResultRow r;
    try {
      r.time = std::stoi(f[0]);
      r.seed = std::stoull(f[1]);
      r.avg_accuracy = std::stod(f[2]);
      r.avg_forgetting = f[3] == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[3]);
    } catch (const std::exception&) {
      throw Error("malformed results line: " + line);
    }
    out.push_back(r);
  }
  return out;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

void draw_panel(std::ostringstream& os, const std::vector<Series>& series, const std::string& title, double top,
                double width, double height) {
  constexpr double L = 60, R = 20, T = 30, B = 40;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!std::isfinite(s.y[k])) continue;
      x0 = std::min(x0, s.x[k]);
      x1 = std::max(x1, s.x[k]);
      y0 = std::min(y0, s.y[k]);
      y1 = std::max(y1, s.y[k]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 - y0 < 1e-9) y0 -= 0.05, y1 += 0.05;
  const double pw = width - L - R, ph = height - T - B;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + T + (1 - (y - y0) / (y1 - y0)) * ph; };
  os << "<text x=\"" << width / 2 << "\" y=\"" << top + 20 << "\" text-anchor=\"middle\">" << title << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << top + T << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
       << std::setprecision(3) << y << "</text>\n";
  }
  os << "<text x=\"" << L + pw / 2 << "\" y=\"" << top + height - 8 << "\" text-anchor=\"middle\" font-size=\"11\">time</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* col = kPalette[si % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      if (std::isfinite(s.y[k])) os << std::setprecision(6) << px(s.x[k]) << ',' << py(s.y[k]) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << L + 8 << "\" y=\"" << top + T + 14 + 14 * si << "\" fill=\"" << col
       << "\" font-size=\"11\">" << s.name << "</text>\n";
  }
}

}  // namespace

std::string curves_svg(const std::vector<Series>& accuracy, const std::vector<Series>& forgetting) {
  for (const auto* group : {&accuracy, &forgetting})
    for (const auto& s : *group) require(s.x.size() == s.y.size(), "series '" + s.name + "' has mismatched x and y");
  constexpr double W = 640, H = 300;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << 2 * H << "\" font-family=\"sans-serif\">\n";
  draw_panel(os, accuracy, "average accuracy", 0, W, H);
  draw_panel(os, forgetting, "average forgetting", H, W, H);
  os << "</svg>\n";
  return os.str();
}

}  // namespace dtcil::metrics
