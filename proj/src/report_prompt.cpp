#include "manipshield/report_prompt.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "manipshield/error.hpp"
#include "manipshield/taxonomy.hpp"

namespace manipshield::report {

namespace {

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string opt(const std::optional<double>& v) { return v ? fixed(*v) : "-"; }

}  // namespace

std::string render_prompt_text(Verdict verdict, double probability,
                               std::span<const Region> regions,
                               std::optional<features::Category> category_hint) {
  std::ostringstream out;
  out << '[' << kPromptTemplateVersion << "]\n";
  out << "verdict: " << (verdict == Verdict::kManipulated ? "manipulated" : "real")
      << " (p=" << fixed(probability) << ")\n";
  if (category_hint) out << "category hint: " << features::to_string(*category_hint) << '\n';
  if (regions.empty()) {
    out << "regions: none\n";
    out << "no manipulated regions detected\n";
  } else {
    out << "regions: " << regions.size() << '\n';
    for (std::size_t i = 0; i < regions.size(); ++i) {
      const auto& r = regions[i];
      out << "region " << (i + 1) << ": box=(" << fixed(r.box.x0) << ", " << fixed(r.box.y0)
          << ", " << fixed(r.box.x1) << ", " << fixed(r.box.y1) << ") cue=" << r.cue
          << " confidence=" << fixed(r.confidence) << '\n';
    }
  }
  return out.str();
}

StructuredPrompt build_structured_prompt(const decoders::Prediction& pred,
                                         std::span<const std::string> cue_names, double threshold,
                                         std::optional<features::Category> category_hint) {
  if (cue_names.size() != static_cast<std::size_t>(pred.cue_logits.size())) {
    fail(ErrorKind::kConfig, "expected " + std::to_string(pred.cue_logits.size()) +
                                 " cue names, got " + std::to_string(cue_names.size()));
  }
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < pred.cue_logits.size(); ++i) {
    if (pred.cue_logits[i] > pred.cue_logits[best]) best = i;
  }
  StructuredPrompt p;
  p.probability = pred.p_manipulated;
  p.verdict = pred.p_manipulated >= threshold ? Verdict::kManipulated : Verdict::kReal;
  p.category_hint = category_hint;
  for (const auto& b : pred.boxes) {
    if (b.confidence >= threshold) {
      p.regions.push_back({b.box.canonical(), cue_names[static_cast<std::size_t>(best)], b.confidence});
    }
  }
  std::sort(p.regions.begin(), p.regions.end(), [](const Region& a, const Region& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.box != b.box) return a.box < b.box;
    return a.cue < b.cue;
  });
  p.text = render_prompt_text(p.verdict, p.probability, p.regions, p.category_hint);
  return p;
}

StructuredPrompt build_structured_prompt(const decoders::Prediction& pred, double threshold) {
  const std::vector<std::string> names(kCueNames.begin(), kCueNames.end());
  return build_structured_prompt(pred, names, threshold);
}

nlohmann::ordered_json to_json(const StructuredPrompt& prompt) {
  nlohmann::ordered_json j;
  j["template"] = kPromptTemplateVersion;
  j["verdict"] = prompt.verdict == Verdict::kManipulated ? "manipulated" : "real";
  j["probability"] = prompt.probability;
  if (prompt.category_hint) j["category_hint"] = features::to_string(*prompt.category_hint);
  nlohmann::ordered_json regions = nlohmann::ordered_json::array();
  for (const auto& r : prompt.regions) {
    regions.push_back({{"box", {r.box.x0, r.box.y0, r.box.x1, r.box.y1}},
                       {"cue", r.cue},
                       {"confidence", r.confidence}});
  }
  j["regions"] = std::move(regions);
  j["text"] = prompt.text;
  return j;
}

std::string render_report(const ReportInputs& in) {
  if (in.evaluations.empty() && !in.matrix && !in.layers && !in.stability) {
    fail(ErrorKind::kShape, "report needs at least one input section");
  }
  std::ostringstream out;
  out << "# Manipulation forensics report\n";

  if (!in.evaluations.empty()) {
    out << "\n## Evaluation\n\n";
    out << "| run | subset | Acc | F1 | IoU | CSS |\n|---|---|---|---|---|---|\n";
    for (const auto& [name, r] : in.evaluations) {
      out << "| " << name << " | overall | " << opt(r.overall.accuracy) << " | " << opt(r.overall.f1)
          << " | " << opt(r.overall.mean_iou) << " | " << opt(r.overall.mean_css) << " |\n";
      for (const auto& [subset, s] : r.per_subset) {
        out << "| " << name << " | " << subset << " | " << opt(s.accuracy) << " | " << opt(s.f1)
            << " | " << opt(s.mean_iou) << " | " << opt(s.mean_css) << " |\n";
      }
    }
  }
  if (in.matrix) {
    out << "\n## Cross-backbone generalization (accuracy)\n\n";
    out << metrics::render_markdown(*in.matrix);
  }
  if (in.layers) {
    const auto& L = *in.layers;
    out << "\n## Layer saliency\n\n";
    out << "bins: " << L.bins << ", epsilon: " << L.epsilon << ", selected layer: " << L.selected_layer
        << "\n\n";
    out << "| layer | KL | LDR | entropy | z(KL) | z(LDR) | z(entropy) | saliency |\n";
    out << "|---|---|---|---|---|---|---|---|\n";
    for (std::size_t l = 0; l < L.num_layers(); ++l) {
      auto z = [&](const std::vector<double>& v) { return l < v.size() ? fixed(v[l]) : "-"; };
      out << "| " << l << (l == L.selected_layer ? " *" : "") << " | " << fixed(L.kl[l], 6) << " | "
          << fixed(L.ldr[l], 6) << " | " << fixed(L.entropy[l], 6) << " | " << z(L.z_kl) << " | "
          << z(L.z_ldr) << " | " << z(L.z_entropy) << " | " << z(L.saliency) << " |\n";
    }
  }
  if (in.stability) {
    const auto& S = *in.stability;
    out << "\n## Layer selection stability\n\n";
    out << "trials: " << S.trials << ", seed: " << S.seed << "\n\n";
    out << "| fraction | modal layer | agreement | selections |\n|---|---|---|---|\n";
    for (std::size_t fi = 0; fi < S.fractions.size(); ++fi) {
      out << "| " << S.fractions[fi] << " | ";
      auto it = S.selected.find(fi);
      if (it == S.selected.end()) {
        out << "skipped | - | - |\n";
        continue;
      }
      out << S.modal_layer.at(fi) << " | " << fixed(S.modal_agreement.at(fi)) << " | ";
      for (std::size_t t = 0; t < it->second.size(); ++t) out << (t ? " " : "") << it->second[t];
      out << " |\n";
    }
    for (const auto& w : S.warnings) out << "\n> " << w << '\n';
  }
  return out.str();
}

}  // namespace manipshield::report
