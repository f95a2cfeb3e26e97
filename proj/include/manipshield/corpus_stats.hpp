#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace manipshield::corpus {

// 8-bit RGB, row-major, 3 bytes per pixel.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::size_t index(std::size_t row, std::size_t col) const { return 3 * (row * width + col); }
};

struct ImageStats {
  double brightness = 0.0;    // mean BT.601 luminance
  double contrast = 0.0;      // population std of luminance
  double colorfulness = 0.0;  // Hasler-Suesstrunk
  double si = 0.0;            // population std of Sobel magnitude, interior pixels

  friend bool operator==(const ImageStats&, const ImageStats&) = default;
};

// Brightness, contrast and colorfulness are computed from exact integer
// moments, so they are bit-identical under any pixel permutation. SI sums
// are compensated and reduced row by row in a fixed order. Rows are split
// across threads for large images.
ImageStats image_stats(const RgbImage& image);

// Plain double-precision evaluation of the same definitions, one pixel at a
// time. Reference for tests and the benchmark.
ImageStats image_stats_reference(const RgbImage& image);

// Parallel over images; output order follows input order.
std::vector<ImageStats> batch_stats(std::span<const RgbImage> images);
std::vector<ImageStats> batch_stats_serial(std::span<const RgbImage> images);

// Rotates 90 degrees clockwise.
RgbImage rotate90(const RgbImage& image);

// Binary PPM (P6, maxval <= 255) or PNG, chosen by the file signature.
RgbImage read_image(const std::string& path);
RgbImage decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
void write_ppm(const RgbImage& image, const std::string& path);

struct Distribution {
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};

Distribution describe(std::span<const double> values);

struct GroupSummary {
  Distribution brightness, contrast, colorfulness, si;
};

struct CorpusSummary {
  std::map<std::string, GroupSummary> groups;
  // Group mean minus reference-group mean, per metric, for every other
  // group and for all non-reference groups pooled as "manipulated".
  std::map<std::string, ImageStats> deltas;
  std::string reference_group;
  std::vector<std::string> warnings;
};

CorpusSummary corpus_summary(const std::map<std::string, std::vector<ImageStats>>& groups,
                             const std::string& reference_group = "real");

nlohmann::ordered_json to_json(const CorpusSummary& s);

}  // namespace manipshield::corpus
