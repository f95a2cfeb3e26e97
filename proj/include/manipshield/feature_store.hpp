#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace manipshield::features {

// Layerwise hidden states for a set of samples, stored [sample][layer][dim]
// row-major as 32-bit floats. Immutable once built.
class FeatureDump {
 public:
  FeatureDump() = default;

  // Checks shape and id invariants. Non-finite values are accepted here so a
  // dump can still be written; decode_dump rejects them on read.
  FeatureDump(std::vector<std::string> sample_ids, std::size_t num_layers,
              std::size_t dim, std::vector<float> values);

  std::size_t num_samples() const { return sample_ids_.size(); }
  std::size_t num_layers() const { return num_layers_; }
  std::size_t dim() const { return dim_; }

  const std::vector<std::string>& sample_ids() const { return sample_ids_; }
  std::span<const float> values() const { return values_; }

  // The D-vector of one sample at one layer.
  std::span<const float> row(std::size_t sample, std::size_t layer) const {
    return {values_.data() + (sample * num_layers_ + layer) * dim_, dim_};
  }

  float at(std::size_t sample, std::size_t layer, std::size_t d) const {
    return values_[(sample * num_layers_ + layer) * dim_ + d];
  }

  // Index of a sample id, if present.
  std::optional<std::size_t> find(std::string_view sample_id) const;

  // New dump holding the given samples in the given order.
  FeatureDump subset(std::span<const std::size_t> samples) const;

  // New dump with a single layer (L = 1).
  FeatureDump layer(std::size_t layer) const;

  // Bit-exact equality: ids, shape, and the raw float bit patterns.
  friend bool operator==(const FeatureDump& a, const FeatureDump& b);

 private:
  std::vector<std::string> sample_ids_;
  std::size_t num_layers_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> values_;
};

inline constexpr char kDumpMagic[4] = {'M', 'S', 'F', 'D'};
inline constexpr std::uint32_t kDumpVersion = 1;
// magic + version + N + L + D
inline constexpr std::size_t kDumpHeaderBytes = 20;

// Writes the .msfd encoding. Returns the number of bytes written.
std::size_t encode_dump(const FeatureDump& dump, std::ostream& sink);
FeatureDump decode_dump(std::istream& source);

std::size_t write_dump_file(const FeatureDump& dump, const std::string& path);
FeatureDump read_dump_file(const std::string& path);

enum class Backbone { kSD14, kSD15, kSD3, kSDXL, kFlux, kDiT, kProprietary };

inline constexpr std::size_t kNumCategories = 12;
enum class Category {
  kAdd,
  kRemove,
  kReplace,
  kColor,
  kBackground,
  kSize,
  kAction,
  kMaterial,
  kExpression,
  kSceneText,
  kHandwrittenText,
  kScanningText,
};

std::string_view to_string(Backbone b);
std::string_view to_string(Category c);
Backbone parse_backbone(std::string_view text);
Category parse_category(std::string_view text);
std::span<const Backbone> all_backbones();

struct SampleLabel {
  std::string sample_id;
  bool is_manipulated = false;
  std::optional<Category> category;
  std::string editor;
  Backbone backbone = Backbone::kSD15;
  std::optional<std::string> pair_id;

  friend bool operator==(const SampleLabel&, const SampleLabel&) = default;
};

using SplitMap = std::map<std::string, std::vector<std::string>>;

struct DatasetManifest {
  std::vector<SampleLabel> labels;
  SplitMap splits;

  // Throws kValidation on any label or split invariant violation.
  void validate() const;

  const SampleLabel* find(std::string_view sample_id) const;
};

// Manifest text: a header row then one comma-separated record per sample in
// the fixed order sample_id,is_manipulated,category,editor,backbone,pair_id.
// Empty category/pair_id fields mean "none".
inline constexpr std::string_view kManifestHeader =
    "sample_id,is_manipulated,category,editor,backbone,pair_id";

DatasetManifest parse_manifest(std::istream& in);
void write_manifest(const DatasetManifest& manifest, std::ostream& out);
DatasetManifest read_manifest_file(const std::string& path);
void write_manifest_file(const DatasetManifest& manifest, const std::string& path);

// Splits are stored as "train", "val", "test" and, for every backbone with
// samples, "<backbone>/train" etc.
DatasetManifest build_splits(const DatasetManifest& manifest, std::uint64_t seed);

// Labels ordered to match the dump's sample order. Missing ids raise kNotFound.
std::vector<SampleLabel> align_labels(const FeatureDump& dump,
                                      const DatasetManifest& manifest);

}  // namespace manipshield::features
