#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "manipshield/feature_store.hpp"

namespace manipshield::lds {

// Layer Discrimination Selection: rank the layers of a hidden-state dump by
// how well they separate real from manipulated samples. Three per-layer
// statistics (mean Gaussian KL, mean discriminant ratio, mean binned entropy)
// are z-scored across layers and summed into a saliency score; the argmax
// layer wins.

inline constexpr std::size_t kDefaultBins = 50;
inline constexpr double kDefaultEpsilon = 1e-8;
// Applied to per-dimension variances before the KL term.
inline constexpr double kVarianceFloor = 1e-12;

struct Params {
  std::size_t bins = kDefaultBins;
  double epsilon = kDefaultEpsilon;
};

// Per-(layer, dim) Gaussian moments of one class, population variance.
struct ClassMoments {
  bool manipulated = false;
  std::size_t num_layers = 0;
  std::size_t dim = 0;
  std::vector<double> mean;      // [layer][dim]
  std::vector<double> variance;  // [layer][dim]

  double mean_at(std::size_t l, std::size_t d) const { return mean[l * dim + d]; }
  double variance_at(std::size_t l, std::size_t d) const { return variance[l * dim + d]; }
};

struct LayerReport {
  std::vector<double> kl;
  std::vector<double> ldr;
  std::vector<double> entropy;
  std::vector<double> z_kl;
  std::vector<double> z_ldr;
  std::vector<double> z_entropy;
  std::vector<double> saliency;
  std::size_t selected_layer = 0;
  std::size_t bins = kDefaultBins;
  double epsilon = kDefaultEpsilon;

  std::size_t num_layers() const { return kl.size(); }
  friend bool operator==(const LayerReport&, const LayerReport&) = default;
};

struct StabilityReport {
  std::vector<double> fractions;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  // Keyed by the fraction's position in `fractions`; skipped fractions have
  // no entry and a line in `warnings`.
  std::map<std::size_t, std::vector<std::size_t>> selected;
  std::map<std::size_t, std::vector<std::size_t>> selected_kl;
  std::map<std::size_t, std::vector<std::size_t>> selected_ldr;
  std::map<std::size_t, std::vector<std::size_t>> selected_entropy;
  std::map<std::size_t, std::size_t> modal_layer;
  std::map<std::size_t, double> modal_agreement;
  std::vector<std::string> warnings;

  friend bool operator==(const StabilityReport&, const StabilityReport&) = default;
};

// KL(N(mu1, var1) || N(mu2, var2)) in nats. Raises kDomain for a
// non-positive variance.
double gaussian_kl(double mu1, double var1, double mu2, double var2);

// Real/manipulated class flags in dump sample order.
std::vector<std::uint8_t> class_flags(std::span<const features::SampleLabel> labels);

ClassMoments class_moments(const features::FeatureDump& dump,
                           std::span<const std::uint8_t> manipulated, bool which);

// Fills kl, ldr and entropy. Layers are processed in parallel; every
// reduction runs in a fixed order, so the output does not depend on the
// thread count.
LayerReport layer_metrics(const features::FeatureDump& dump,
                          std::span<const std::uint8_t> manipulated, const Params& params);
LayerReport layer_metrics(const features::FeatureDump& dump,
                          std::span<const features::SampleLabel> labels, const Params& params);

// Single-threaded, straightforward evaluation of the same quantities. Kept as
// the reference the parallel kernel is tested and benchmarked against.
LayerReport layer_metrics_serial(const features::FeatureDump& dump,
                                 std::span<const std::uint8_t> manipulated,
                                 const Params& params);

// Z-scores each metric across layers (population std; a constant metric gives
// all zeros), sums them into the saliency, and selects the lowest-index argmax.
LayerReport saliency_and_select(LayerReport report);

// Z-scores of one metric across layers.
std::vector<double> zscores(std::span<const double> values);

// Lowest index of the maximum.
std::size_t argmax(std::span<const double> values);

// Repeated stratified subsampling without replacement. Deterministic in seed.
StabilityReport stability_analysis(const features::FeatureDump& dump,
                                   std::span<const std::uint8_t> manipulated,
                                   std::span<const double> fractions, std::size_t trials,
                                   std::uint64_t seed, const Params& params);

// Summation tree used by every reduction in this module.
double pairwise_sum(std::span<const double> values);

nlohmann::ordered_json to_json(const LayerReport& report);
nlohmann::ordered_json to_json(const StabilityReport& report);
LayerReport layer_report_from_json(const nlohmann::json& j);
StabilityReport stability_report_from_json(const nlohmann::json& j);

}  // namespace manipshield::lds
