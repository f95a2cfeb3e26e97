#include "manipshield/metrics_eval.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "manipshield/error.hpp"

namespace manipshield::metrics {

BinaryMetrics binary_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels,
                             double threshold) {
  if (scores.size() != labels.size()) {
    fail(ErrorKind::kShape, "got " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) fail(ErrorKind::kShape, "binary metrics need at least one sample");
  BinaryMetrics m;
  auto& c = m.counts;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    const bool actual = labels[i] != 0;
    if (predicted && actual) ++c.tp;
    else if (predicted) ++c.fp;
    else if (actual) ++c.fn;
    else ++c.tn;
  }
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  m.f1 = denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
  return m;
}

double localization_score(std::span<const decoders::ScoredBox> pred, std::span<const Box> gt,
                          double confidence_threshold) {
  std::vector<decoders::ScoredBox> kept;
  for (const auto& p : pred) {
    if (p.confidence >= confidence_threshold) kept.push_back({p.box.canonical(), p.confidence});
  }
  if (gt.empty()) return kept.empty() ? 1.0 : 0.0;
  std::vector<Box> g;
  g.reserve(gt.size());
  for (const auto& b : gt) g.push_back(b.canonical());
  double sum = 0.0;
  for (const auto& [p, q] : decoders::match_boxes(kept, g)) sum += box_iou(kept[p].box, g[q]);
  return sum / static_cast<double>(g.size());
}

double css(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::kShape, "embedding lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorKind::kDomain, "css of a zero vector is undefined");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace {

nlohmann::ordered_json subset_json(const SubsetMetrics& s) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (s.accuracy) j["accuracy"] = *s.accuracy;
  if (s.f1) j["f1"] = *s.f1;
  if (s.mean_iou) j["mean_iou"] = *s.mean_iou;
  if (s.mean_css) j["mean_css"] = *s.mean_css;
  return j;
}

SubsetMetrics subset_from_json(const nlohmann::json& j) {
  SubsetMetrics s;
  if (j.contains("accuracy")) s.accuracy = j["accuracy"].get<double>();
  if (j.contains("f1")) s.f1 = j["f1"].get<double>();
  if (j.contains("mean_iou")) s.mean_iou = j["mean_iou"].get<double>();
  if (j.contains("mean_css")) s.mean_css = j["mean_css"].get<double>();
  return s;
}

}  // namespace

nlohmann::ordered_json to_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["kind"] = "eval_result";
  j["overall"] = subset_json(r.overall);
  if (r.counts) {
    j["confusion"] = {{"tp", r.counts->tp}, {"fp", r.counts->fp}, {"tn", r.counts->tn},
                      {"fn", r.counts->fn}};
  }
  nlohmann::ordered_json subsets = nlohmann::ordered_json::object();
  for (const auto& [name, s] : r.per_subset) subsets[name] = subset_json(s);
  j["per_subset"] = std::move(subsets);
  return j;
}

EvalResult eval_result_from_json(const nlohmann::json& j) {
  EvalResult r;
  r.overall = subset_from_json(j.at("overall"));
  if (j.contains("confusion")) {
    const auto& c = j["confusion"];
    r.counts = ConfusionCounts{c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(),
                               c.at("tn").get<std::size_t>(), c.at("fn").get<std::size_t>()};
  }
  if (j.contains("per_subset")) {
    for (const auto& [name, s] : j["per_subset"].items()) r.per_subset[name] = subset_from_json(s);
  }
  return r;
}

GeneralizationMatrix generalization_matrix(const RunGrid& runs) {
  if (runs.empty()) fail(ErrorKind::kShape, "generalization matrix needs at least one run");
  std::set<std::string> trains, tests;
  for (const auto& [key, result] : runs) {
    trains.insert(key.first);
    tests.insert(key.second);
  }
  GeneralizationMatrix m;
  m.train_subsets.assign(trains.begin(), trains.end());
  m.test_subsets.assign(tests.begin(), tests.end());
  for (const auto& tr : m.train_subsets) {
    std::vector<std::optional<double>> row;
    double sum = 0.0;
    std::size_t present = 0;
    for (const auto& te : m.test_subsets) {
      auto it = runs.find({tr, te});
      if (it != runs.end() && it->second.overall.accuracy) {
        row.push_back(it->second.overall.accuracy);
        sum += *it->second.overall.accuracy;
        ++present;
      } else {
        row.emplace_back();
      }
    }
    m.accuracy.push_back(std::move(row));
    m.row_average.push_back(present ? std::optional<double>(sum / static_cast<double>(present))
                                    : std::nullopt);
  }
  return m;
}

nlohmann::ordered_json to_json(const GeneralizationMatrix& m) {
  nlohmann::ordered_json j;
  j["kind"] = "generalization_matrix";
  j["train_subsets"] = m.train_subsets;
  j["test_subsets"] = m.test_subsets;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.accuracy.size(); ++i) {
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (const auto& c : m.accuracy[i]) cells.push_back(c ? nlohmann::ordered_json(*c) : nullptr);
    rows.push_back(std::move(cells));
  }
  j["accuracy"] = std::move(rows);
  nlohmann::ordered_json avg = nlohmann::ordered_json::array();
  for (const auto& a : m.row_average) avg.push_back(a ? nlohmann::ordered_json(*a) : nullptr);
  j["row_average"] = std::move(avg);
  return j;
}

namespace {

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string render_markdown(const GeneralizationMatrix& m) {
  std::ostringstream out;
  out << "| train \\ test |";
  for (const auto& te : m.test_subsets) out << ' ' << te << " |";
  out << " avg |\n|---|";
  for (std::size_t i = 0; i < m.test_subsets.size(); ++i) out << "---|";
  out << "---|\n";
  for (std::size_t i = 0; i < m.train_subsets.size(); ++i) {
    out << "| " << m.train_subsets[i] << " |";
    for (std::size_t j = 0; j < m.test_subsets.size(); ++j) {
      const auto& c = m.accuracy[i][j];
      if (!c) {
        out << " - |";
      } else if (m.train_subsets[i] == m.test_subsets[j]) {
        out << " **" << fmt4(*c) << "** |";
      } else {
        out << ' ' << fmt4(*c) << " |";
      }
    }
    out << ' ' << (m.row_average[i] ? fmt4(*m.row_average[i]) : "-") << " |\n";
  }
  return out.str();
}

}  // namespace manipshield::metrics
