#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "manipshield/geometry.hpp"

namespace manipshield::losses {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct LossConfig {
  double tau = 0.1;
  double alpha = 0.25;
  double gamma = 2.0;
  double lambda_binary = 1.0;
  double lambda_bbox = 1.0;
  double lambda_cue = 1.0;
  std::size_t num_cues = 12;

  // Throws kParameter when a range constraint is violated.
  void validate() const;
};

// 2N embeddings (one per row) and the N positive pairs that partition them.
struct ContrastiveBatch {
  Matrix embeddings;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  void validate() const;
};

enum class Anchoring {
  kFirst,      // one term per pair, anchored at the pair's first index
  kSymmetric,  // both members anchor; 2N terms
};

enum class Normalizer {
  kPairs,       // divide by N, the pair count
  kEmbeddings,  // divide by 2N
};

struct ContrastiveOptions {
  Anchoring anchoring = Anchoring::kFirst;
  Normalizer normalizer = Normalizer::kPairs;
};

struct BatchLoss {
  double loss = 0.0;
  Matrix grad;  // same shape as the input embeddings
};

// -(1/N) sum_i log[ exp(s_ij / tau) / sum_{k != i,j} exp(s_ik / tau) ] over
// cosine similarities of l2-normalized embeddings. The positive is left out
// of the denominator, so the value can go below zero. Gradients are taken
// with respect to the unnormalized embeddings.
BatchLoss contrastive_loss(const ContrastiveBatch& batch, double tau,
                           const ContrastiveOptions& options = {});

struct ScalarLoss {
  double loss = 0.0;
  double grad = 0.0;
};

inline constexpr double kProbabilityClamp = 1e-7;

// -alpha (1 - p_t)^gamma log p_t with p_t = p for a positive target and 1 - p
// otherwise. grad is dL/dp; it is zero where the clamp is active.
ScalarLoss focal_loss(double p, bool target, double alpha, double gamma);

struct BoxLoss {
  double loss = 0.0;
  std::vector<std::array<double, 4>> grad;
};

// Mean over boxes of the squared coordinate error, averaged over the four
// coordinates.
BoxLoss bbox_mse(std::span<const Box> pred, std::span<const Box> gt);

struct VectorLoss {
  double loss = 0.0;
  Vector grad;
};

// -(1/C) log softmax(logits)[target]; the 1/C factor is kept on purpose.
VectorLoss cue_cross_entropy(const Vector& logits, std::size_t target);

struct LossParts {
  double binary = 0.0;
  double bbox = 0.0;
  double cue = 0.0;
};

double total_loss(const LossParts& parts, const LossConfig& cfg);

}  // namespace manipshield::losses
