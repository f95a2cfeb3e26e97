#include "manipshield/synthetic.hpp"

#include <cmath>
#include <cstdio>

#include "manipshield/rng.hpp"

namespace manipshield::synthetic {

namespace {

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
  return buf;
}

}  // namespace

LabeledDump planted_layer(const PlantedLayerSpec& spec) {
  Rng rng(spec.seed);
  const std::size_t n = 2 * spec.per_class;
  const auto shifted = static_cast<std::size_t>(std::llround(spec.shifted_fraction * static_cast<double>(spec.dim)));
  const auto backbones = features::all_backbones();

  std::vector<std::string> ids;
  std::vector<float> values(n * spec.layers * spec.dim);
  LabeledDump out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool manipulated = i % 2 == 1;
    ids.push_back(numbered("s", i));
    features::SampleLabel label;
    label.sample_id = ids.back();
    label.is_manipulated = manipulated;
    if (manipulated) label.category = static_cast<features::Category>((i / 2) % features::kNumCategories);
    label.editor = manipulated ? "synthetic" : "";
    label.backbone = backbones[(i / 2) % backbones.size()];
    label.pair_id = numbered("p", i / 2);
    out.labels.push_back(label);

    for (std::size_t l = 0; l < spec.layers; ++l) {
      for (std::size_t d = 0; d < spec.dim; ++d) {
        double v = standard_normal(rng);
        if (manipulated && l == spec.planted_layer && d < shifted) v += spec.shift;
        values[(i * spec.layers + l) * spec.dim + d] = static_cast<float>(v);
      }
    }
  }
  out.dump = features::FeatureDump(std::move(ids), spec.layers, spec.dim, std::move(values));
  out.manifest.labels = out.labels;
  return out;
}

Supervised blobs(std::size_t per_class, std::size_t dim, double separation, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 2 * per_class;
  Supervised s;
  s.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    const bool manipulated = i % 2 == 1;
    const double center = manipulated ? separation / 2 : -separation / 2;
    for (std::size_t d = 0; d < dim; ++d) {
      s.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = center + standard_normal(rng);
    }
    s.targets.manipulated.push_back(manipulated ? 1 : 0);
    s.targets.cue.push_back(-1);
    s.targets.boxes.emplace_back();
  }
  return s;
}

Supervised identity_localization(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Supervised s;
  s.features = decoders::Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const bool manipulated = i % 4 != 3;
    const double x0 = 0.05 + 0.5 * uniform01(rng);
    const double y0 = 0.05 + 0.5 * uniform01(rng);
    const double x1 = x0 + 0.15 + 0.25 * uniform01(rng);
    const double y1 = y0 + 0.15 + 0.25 * uniform01(rng);
    const double c[4] = {x0, y0, x1, y1};
    for (Eigen::Index d = 0; d < static_cast<Eigen::Index>(dim); ++d) {
      if (d < 4) {
        s.features(r, d) = 2.0 * c[d] - 1.0;
      } else if (d == 4) {
        s.features(r, d) = manipulated ? 1.0 : -1.0;
      } else {
        s.features(r, d) = 0.01 * standard_normal(rng);
      }
    }
    s.targets.manipulated.push_back(manipulated ? 1 : 0);
    s.targets.cue.push_back(-1);
    s.targets.boxes.push_back(manipulated ? std::vector<Box>{Box{x0, y0, x1, y1}} : std::vector<Box>{});
  }
  return s;
}

PairedFeatures content_pairs(std::size_t num_pairs, std::size_t content_dims,
                             std::size_t nuisance_dims, double nuisance_std, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t dim = content_dims + nuisance_dims;
  PairedFeatures p;
  p.features.resize(static_cast<Eigen::Index>(2 * num_pairs), static_cast<Eigen::Index>(dim));
  for (std::size_t k = 0; k < num_pairs; ++k) {
    std::vector<double> content(content_dims);
    for (auto& c : content) c = standard_normal(rng);
    for (std::size_t m = 0; m < 2; ++m) {
      const auto r = static_cast<Eigen::Index>(2 * k + m);
      for (std::size_t d = 0; d < dim; ++d) {
        const double v = d < content_dims ? content[d] + 0.1 * standard_normal(rng)
                                          : nuisance_std * standard_normal(rng);
        p.features(r, static_cast<Eigen::Index>(d)) = v;
      }
    }
    p.pairs.emplace_back(2 * k, 2 * k + 1);
  }
  return p;
}

corpus::RgbImage random_image(std::size_t width, std::size_t height, std::uint64_t seed) {
  Rng rng(seed);
  corpus::RgbImage img{width, height, std::vector<std::uint8_t>(3 * width * height)};
  for (auto& px : img.pixels) px = static_cast<std::uint8_t>(uniform_index(rng, 256));
  return img;
}

}  // namespace manipshield::synthetic
