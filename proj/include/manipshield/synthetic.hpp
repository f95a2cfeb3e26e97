#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "manipshield/corpus_stats.hpp"
#include "manipshield/decoders.hpp"
#include "manipshield/feature_store.hpp"

// Generated datasets with known answers, for tests and benchmarks.
namespace manipshield::synthetic {

struct LabeledDump {
  features::FeatureDump dump;
  std::vector<features::SampleLabel> labels;
  features::DatasetManifest manifest;
};

struct PlantedLayerSpec {
  std::size_t layers = 32;
  std::size_t dim = 128;
  std::size_t per_class = 400;
  std::size_t planted_layer = 20;
  double shifted_fraction = 0.2;  // of dims
  double shift = 1.0;             // in units of the noise std
  std::uint64_t seed = 0;
};

// Standard normal noise everywhere; manipulated samples get +shift in the
// first round(shifted_fraction * dim) dims of the planted layer only.
// Samples alternate real/manipulated and consecutive pairs share a pair_id.
LabeledDump planted_layer(const PlantedLayerSpec& spec);

struct Supervised {
  decoders::Matrix features;  // rows are samples
  decoders::Targets targets;
};

// Two Gaussian blobs whose means differ by `separation` in every dim.
Supervised blobs(std::size_t per_class, std::size_t dim, double separation, std::uint64_t seed);

// Three of every four samples are manipulated with one random box; the first
// four feature dims are that box mapped to [-1, 1] and dim 4 is +1. Real
// samples have no box and dim 4 = -1. Needs dim >= 5.
Supervised identity_localization(std::size_t n, std::size_t dim, std::uint64_t seed);

struct PairedFeatures {
  decoders::Matrix features;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

// Pair members share a random content vector in the first `content_dims`
// dims; every dim also carries independent noise, which is large in the
// remaining nuisance dims.
PairedFeatures content_pairs(std::size_t num_pairs, std::size_t content_dims,
                             std::size_t nuisance_dims, double nuisance_std, std::uint64_t seed);

corpus::RgbImage random_image(std::size_t width, std::size_t height, std::uint64_t seed);

}  // namespace manipshield::synthetic
