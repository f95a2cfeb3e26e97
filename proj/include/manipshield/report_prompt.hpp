#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "manipshield/decoders.hpp"
#include "manipshield/feature_store.hpp"
#include "manipshield/lds_probe.hpp"
#include "manipshield/metrics_eval.hpp"

namespace manipshield::report {

// Bump whenever the rendered wording changes; golden files pin it.
inline constexpr std::string_view kPromptTemplateVersion = "manipshield-prompt/v1";

enum class Verdict { kReal, kManipulated };

struct Region {
  Box box;
  std::string cue;
  double confidence = 0.0;

  friend bool operator==(const Region&, const Region&) = default;
};

struct StructuredPrompt {
  Verdict verdict = Verdict::kReal;
  double probability = 0.0;
  std::vector<Region> regions;  // confidence descending, then box coordinates
  std::optional<features::Category> category_hint;
  std::string text;
};

// Rendering is a pure function of the other fields.
std::string render_prompt_text(Verdict verdict, double probability,
                               std::span<const Region> regions,
                               std::optional<features::Category> category_hint);

// Regions are the boxes with confidence >= threshold, each labeled with the
// argmax cue of the prediction's cue logits. Raises kConfig unless
// cue_names has one entry per cue logit.
StructuredPrompt build_structured_prompt(const decoders::Prediction& pred,
                                         std::span<const std::string> cue_names,
                                         double threshold = 0.5,
                                         std::optional<features::Category> category_hint = {});

// Convenience overload using the standard 12-cue taxonomy.
StructuredPrompt build_structured_prompt(const decoders::Prediction& pred, double threshold = 0.5);

nlohmann::ordered_json to_json(const StructuredPrompt& prompt);

struct ReportInputs {
  std::vector<std::pair<std::string, metrics::EvalResult>> evaluations;
  std::optional<metrics::GeneralizationMatrix> matrix;
  std::optional<lds::LayerReport> layers;
  std::optional<lds::StabilityReport> stability;
};

// Markdown document with one section per provided input. Raises kShape when
// nothing is provided.
std::string render_report(const ReportInputs& inputs);

}  // namespace manipshield::report
