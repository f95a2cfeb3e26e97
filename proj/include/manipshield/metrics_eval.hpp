#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "manipshield/decoders.hpp"
#include "manipshield/geometry.hpp"

namespace manipshield::metrics {

using manipshield::box_iou;

inline constexpr double kDefaultThreshold = 0.5;

// Positive class = manipulated.
struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct BinaryMetrics {
  ConfusionCounts counts;
  double accuracy = 0.0;
  double f1 = 0.0;
};

// Predicts manipulated iff score >= threshold. F1 is 0 when 2tp + fp + fn is 0.
BinaryMetrics binary_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels,
                             double threshold = kDefaultThreshold);

// Greedy-matched mean IoU over ground truth after dropping predictions below
// `confidence_threshold`; unmatched ground truth counts as 0. No ground truth
// scores 1 without predictions and 0 with any.
double localization_score(std::span<const decoders::ScoredBox> pred, std::span<const Box> gt,
                          double confidence_threshold = kDefaultThreshold);

// Cosine similarity; kDomain on a zero vector, kShape on a length mismatch.
double css(std::span<const double> a, std::span<const double> b);

struct SubsetMetrics {
  std::optional<double> accuracy;
  std::optional<double> f1;
  std::optional<double> mean_iou;
  std::optional<double> mean_css;
};

struct EvalResult {
  SubsetMetrics overall;
  std::map<std::string, SubsetMetrics> per_subset;
  std::optional<ConfusionCounts> counts;
};

nlohmann::ordered_json to_json(const EvalResult& r);
EvalResult eval_result_from_json(const nlohmann::json& j);

// (train subset, test subset) -> result; only overall accuracy is used.
using RunGrid = std::map<std::pair<std::string, std::string>, EvalResult>;

struct GeneralizationMatrix {
  std::vector<std::string> train_subsets;
  std::vector<std::string> test_subsets;
  // [train][test]; empty optional = missing cell
  std::vector<std::vector<std::optional<double>>> accuracy;
  // Mean over the present cells of each row; empty when the row has none.
  std::vector<std::optional<double>> row_average;
};

GeneralizationMatrix generalization_matrix(const RunGrid& runs);
nlohmann::ordered_json to_json(const GeneralizationMatrix& m);
// Markdown table; diagonal cells in bold, missing cells as "-".
std::string render_markdown(const GeneralizationMatrix& m);

}  // namespace manipshield::metrics
