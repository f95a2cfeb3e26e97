#include "manipshield/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "manipshield/error.hpp"

namespace manipshield::losses {

void LossConfig::validate() const {
  if (!(tau > 0.0)) fail(ErrorKind::kParameter, "tau must be positive");
  if (!(alpha > 0.0 && alpha <= 1.0)) fail(ErrorKind::kParameter, "alpha must lie in (0, 1]");
  if (!(gamma >= 0.0)) fail(ErrorKind::kParameter, "gamma must be non-negative");
  if (!(lambda_binary >= 0.0 && lambda_bbox >= 0.0 && lambda_cue >= 0.0)) {
    fail(ErrorKind::kParameter, "loss weights must be non-negative");
  }
  if (num_cues < 2) fail(ErrorKind::kParameter, "num_cues must be at least 2");
}

void ContrastiveBatch::validate() const {
  const auto rows = static_cast<std::size_t>(embeddings.rows());
  if (pairs.size() < 2) {
    fail(ErrorKind::kShape, "contrastive batch needs at least 2 pairs, got " +
                                std::to_string(pairs.size()));
  }
  if (rows != 2 * pairs.size()) {
    fail(ErrorKind::kShape, "contrastive batch has " + std::to_string(rows) +
                                " embeddings for " + std::to_string(pairs.size()) + " pairs");
  }
  std::vector<bool> seen(rows, false);
  for (const auto& [i, j] : pairs) {
    if (i >= rows || j >= rows || i == j || seen[i] || seen[j]) {
      fail(ErrorKind::kShape, "contrastive pairs must be disjoint and cover every embedding");
    }
    seen[i] = seen[j] = true;
  }
}

BatchLoss contrastive_loss(const ContrastiveBatch& batch, double tau,
                           const ContrastiveOptions& options) {
  batch.validate();
  if (!(tau > 0.0)) fail(ErrorKind::kParameter, "tau must be positive");
  const Matrix& f = batch.embeddings;
  const Eigen::Index n = f.rows();

  Vector norms = f.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(norms[i] > 0.0)) {
      fail(ErrorKind::kDomain, "embedding " + std::to_string(i) + " has zero norm");
    }
  }
  const Matrix u = norms.cwiseInverse().asDiagonal() * f;
  const Matrix sim = u * u.transpose();

  std::vector<std::pair<std::size_t, std::size_t>> anchors;
  anchors.reserve(batch.pairs.size() * 2);
  for (const auto& [i, j] : batch.pairs) {
    anchors.emplace_back(i, j);
    if (options.anchoring == Anchoring::kSymmetric) anchors.emplace_back(j, i);
  }
  const double divisor = options.normalizer == Normalizer::kPairs
                             ? static_cast<double>(batch.pairs.size())
                             : static_cast<double>(n);

  // Gradient with respect to the normalized embeddings first.
  Matrix gu = Matrix::Zero(n, f.cols());
  double total = 0.0;
  std::vector<double> w(static_cast<std::size_t>(n));
  for (const auto& [a, p] : anchors) {
    const auto ai = static_cast<Eigen::Index>(a);
    const auto pi = static_cast<Eigen::Index>(p);
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == ai || k == pi) continue;
      mx = std::max(mx, sim(ai, k) / tau);
    }
    double z = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == ai || k == pi) continue;
      w[static_cast<std::size_t>(k)] = std::exp(sim(ai, k) / tau - mx);
      z += w[static_cast<std::size_t>(k)];
    }
    const double lse = mx + std::log(z);
    total += -sim(ai, pi) / tau + lse;

    const double scale = 1.0 / (tau * divisor);
    gu.row(ai) -= scale * u.row(pi);
    gu.row(pi) -= scale * u.row(ai);
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == ai || k == pi) continue;
      const double wk = w[static_cast<std::size_t>(k)] / z;
      gu.row(ai) += scale * wk * u.row(k);
      gu.row(k) += scale * wk * u.row(ai);
    }
  }

  BatchLoss out;
  out.loss = total / divisor;
  out.grad.resize(n, f.cols());
  // d u / d f = (I - u u^T) / |f|
  for (Eigen::Index i = 0; i < n; ++i) {
    const double proj = u.row(i).dot(gu.row(i));
    out.grad.row(i) = (gu.row(i) - proj * u.row(i)) / norms[i];
  }
  return out;
}

ScalarLoss focal_loss(double p, bool target, double alpha, double gamma) {
  const double pc = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  const bool clamped = pc != p;
  const double pt = target ? pc : 1.0 - pc;
  const double q = 1.0 - pt;
  const double log_pt = std::log(pt);
  const double mod = std::pow(q, gamma);

  ScalarLoss out;
  out.loss = -alpha * mod * log_pt;
  if (!clamped) {
    double dpt = -alpha * mod / pt;
    if (gamma != 0.0) dpt += alpha * gamma * std::pow(q, gamma - 1.0) * log_pt;
    out.grad = target ? dpt : -dpt;
  }
  return out;
}

BoxLoss bbox_mse(std::span<const Box> pred, std::span<const Box> gt) {
  if (pred.size() != gt.size()) {
    fail(ErrorKind::kShape, "bbox_mse got " + std::to_string(pred.size()) + " predictions for " +
                                std::to_string(gt.size()) + " ground-truth boxes");
  }
  if (pred.empty()) fail(ErrorKind::kShape, "bbox_mse needs at least one box");
  const double denom = 4.0 * static_cast<double>(pred.size());
  BoxLoss out;
  out.grad.resize(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto a = pred[i].coords();
    const auto b = gt[i].coords();
    for (std::size_t c = 0; c < 4; ++c) {
      const double e = a[c] - b[c];
      sum += e * e;
      out.grad[i][c] = 2.0 * e / denom;
    }
  }
  out.loss = sum / denom;
  return out;
}

VectorLoss cue_cross_entropy(const Vector& logits, std::size_t target) {
  const auto c = static_cast<std::size_t>(logits.size());
  if (c < 2) fail(ErrorKind::kShape, "cue cross-entropy needs at least 2 classes");
  if (target >= c) {
    fail(ErrorKind::kIndex, "cue target " + std::to_string(target) + " out of range for " +
                                std::to_string(c) + " classes");
  }
  const double mx = logits.maxCoeff();
  const Vector e = (logits.array() - mx).exp().matrix();
  const double z = e.sum();
  const double inv_c = 1.0 / static_cast<double>(c);
  VectorLoss out;
  const auto t = static_cast<Eigen::Index>(target);
  out.loss = -inv_c * (logits[t] - mx - std::log(z));
  out.grad = e / z;
  out.grad[t] -= 1.0;
  out.grad *= inv_c;
  return out;
}

double total_loss(const LossParts& parts, const LossConfig& cfg) {
  return cfg.lambda_binary * parts.binary + cfg.lambda_bbox * parts.bbox +
         cfg.lambda_cue * parts.cue;
}

}  // namespace manipshield::losses
