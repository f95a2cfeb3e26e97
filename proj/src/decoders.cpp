#include "manipshield/decoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "manipshield/binary_io.hpp"
#include "manipshield/error.hpp"

namespace manipshield::decoders {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

Matrix xavier(std::size_t out, std::size_t in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = (2.0 * uniform01(rng) - 1.0) * limit;
  }
  return w;
}

}  // namespace

LoraLinear LoraLinear::affine(Matrix weight, Vector bias) {
  LoraLinear l;
  l.lora_a = Matrix::Zero(weight.rows(), 0);
  l.lora_b = Matrix::Zero(0, weight.cols());
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  l.validate();
  return l;
}

LoraLinear LoraLinear::adapted(Matrix weight, std::size_t rank, double alpha, Rng& rng) {
  if (rank == 0) fail(ErrorKind::kParameter, "adapter rank must be positive");
  const auto r = static_cast<Eigen::Index>(rank);
  LoraLinear l;
  l.lora_a.resize(weight.rows(), r);
  const double sd = 1.0 / std::sqrt(static_cast<double>(weight.cols()));
  for (Eigen::Index i = 0; i < l.lora_a.size(); ++i) l.lora_a.data()[i] = sd * standard_normal(rng);
  l.lora_b = Matrix::Zero(r, weight.cols());
  l.bias = Vector::Zero(weight.rows());
  l.weight = std::move(weight);
  l.scale = alpha / static_cast<double>(rank);
  l.train_base = false;
  l.validate();
  return l;
}

void LoraLinear::validate() const {
  const Eigen::Index d = weight.rows();
  const Eigen::Index k = weight.cols();
  if (bias.size() != d) fail(ErrorKind::kShape, "bias length must equal output dim");
  if (lora_a.rows() != d || lora_b.cols() != k || lora_a.cols() != lora_b.rows()) {
    fail(ErrorKind::kShape, "adapter shapes " + shape_str(lora_a.rows(), lora_a.cols()) + " and " +
                                shape_str(lora_b.rows(), lora_b.cols()) +
                                " do not conform to weight " + shape_str(d, k));
  }
  if (lora_a.cols() > std::min(d, k)) fail(ErrorKind::kShape, "adapter rank exceeds min(d, k)");
}

Matrix LoraLinear::merged() const {
  if (rank() == 0) return weight;
  return weight + scale * (lora_a * lora_b);
}

Matrix LoraLinear::forward(const Matrix& x) const {
  if (x.rows() != weight.cols()) {
    fail(ErrorKind::kShape, "input has " + std::to_string(x.rows()) + " rows, layer expects " +
                                std::to_string(weight.cols()));
  }
  Matrix h = weight * x;
  h.colwise() += bias;
  if (rank() > 0) h.noalias() += scale * (lora_a * (lora_b * x));
  return h;
}

Vector lora_forward(const LoraLinear& layer, const Vector& x) {
  return layer.forward(x);
}

const char* to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::kDetection: return "detection";
    case HeadKind::kCue: return "cue";
    case HeadKind::kLocalization: return "localization";
    case HeadKind::kProjector: return "projector";
  }
  return "unknown";
}

Matrix DecoderHead::forward(const Matrix& x) const {
  Matrix a = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    a = layers[i].forward(a);
    if (i + 1 < layers.size()) a = a.array().tanh().matrix();
  }
  return a;
}

namespace {

DecoderHead make_head(HeadKind kind, const HeadsConfig& cfg, std::size_t out_dim, Rng& rng) {
  DecoderHead head;
  head.kind = kind;
  std::size_t in = cfg.input_dim;
  for (std::size_t width : cfg.hidden) {
    head.layers.push_back(LoraLinear::affine(xavier(width, in, rng),
                                             Vector::Zero(static_cast<Eigen::Index>(width))));
    in = width;
  }
  Matrix w = cfg.zero_init_output
                 ? Matrix::Zero(static_cast<Eigen::Index>(out_dim), static_cast<Eigen::Index>(in))
                 : xavier(out_dim, in, rng);
  head.layers.push_back(
      LoraLinear::affine(std::move(w), Vector::Zero(static_cast<Eigen::Index>(out_dim))));
  return head;
}

}  // namespace

Heads init_heads(const HeadsConfig& config, std::uint64_t seed) {
  if (config.input_dim == 0) fail(ErrorKind::kParameter, "decoder input dim must be positive");
  if (config.num_cues < 2) fail(ErrorKind::kParameter, "need at least 2 cue classes");
  if (config.max_boxes == 0) fail(ErrorKind::kParameter, "need at least 1 box slot");
  Rng rng(seed);
  Heads h;
  h.detection = make_head(HeadKind::kDetection, config, 1, rng);
  h.cue = make_head(HeadKind::kCue, config, config.num_cues, rng);
  h.localization = make_head(HeadKind::kLocalization, config, config.max_boxes * 5, rng);
  return h;
}

namespace {

struct SlotDecode {
  std::vector<ScoredBox> boxes;
  std::vector<std::array<bool, 2>> swapped;  // x, y
  std::vector<std::array<double, 5>> squashed;
};

SlotDecode decode_slots(const Eigen::Ref<const Vector>& raw) {
  const auto k = static_cast<std::size_t>(raw.size() / 5);
  SlotDecode out;
  out.boxes.resize(k);
  out.swapped.resize(k);
  out.squashed.resize(k);
  for (std::size_t s = 0; s < k; ++s) {
    auto& q = out.squashed[s];
    for (std::size_t c = 0; c < 5; ++c) q[c] = sigmoid(raw[static_cast<Eigen::Index>(5 * s + c)]);
    out.swapped[s] = {q[0] > q[2], q[1] > q[3]};
    out.boxes[s].box = Box{q[0], q[1], q[2], q[3]}.canonical();
    out.boxes[s].confidence = q[4];
  }
  return out;
}

}  // namespace

std::vector<Prediction> forward_heads(const Matrix& features_by_row, const Heads& heads) {
  if (static_cast<std::size_t>(features_by_row.cols()) != heads.input_dim()) {
    fail(ErrorKind::kShape, "feature dim " + std::to_string(features_by_row.cols()) +
                                " does not match decoder input dim " +
                                std::to_string(heads.input_dim()));
  }
  const Matrix x = features_by_row.transpose();
  const Matrix det = heads.detection.forward(x);
  const Matrix cue = heads.cue.forward(x);
  const Matrix loc = heads.localization.forward(x);
  std::vector<Prediction> out(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    auto& p = out[static_cast<std::size_t>(i)];
    p.p_manipulated = sigmoid(det(0, i));
    p.cue_logits = cue.col(i);
    p.boxes = decode_slots(loc.col(i)).boxes;
  }
  return out;
}

Prediction forward_heads(const Vector& features, const Heads& heads) {
  return forward_heads(Matrix(features.transpose()), heads).front();
}

std::vector<std::pair<std::size_t, std::size_t>> match_boxes(std::span<const ScoredBox> pred,
                                                             std::span<const Box> gt) {
  struct Candidate {
    double iou;
    std::size_t p, g;
  };
  std::vector<Candidate> cands;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double iou = box_iou(pred[p].box, gt[g]);
      if (iou > 0.0) cands.push_back({iou, p, g});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  std::vector<bool> used_p(pred.size(), false), used_g(gt.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& c : cands) {
    if (used_p[c.p] || used_g[c.g]) continue;
    used_p[c.p] = used_g[c.g] = true;
    out.emplace_back(c.p, c.g);
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) fail(ErrorKind::kParameter, "learning rate must be non-negative");
  if (batch_size == 0) fail(ErrorKind::kParameter, "batch size must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
    fail(ErrorKind::kParameter, "warmup ratio must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) fail(ErrorKind::kParameter, "weight decay must be non-negative");
  if (lora_rank == 0) fail(ErrorKind::kParameter, "LoRA rank must be positive");
}

void Targets::validate(std::size_t num_samples, std::size_t num_cues) const {
  if (manipulated.size() != num_samples || cue.size() != num_samples ||
      boxes.size() != num_samples) {
    fail(ErrorKind::kShape, "targets must have one entry per sample");
  }
  for (std::size_t i = 0; i < num_samples; ++i) {
    if (cue[i] >= static_cast<int>(num_cues)) {
      fail(ErrorKind::kIndex, "cue target out of range at sample " + std::to_string(i));
    }
  }
}

namespace {

struct Cache {
  std::vector<Matrix> inputs;   // input to each layer
  std::vector<Matrix> lowrank;  // B * input, for adapted layers
  Matrix output;
};

Matrix forward_cached(const std::vector<LoraLinear>& layers, const Matrix& x, bool tanh_hidden,
                      Cache& cache) {
  cache.inputs.clear();
  cache.lowrank.clear();
  Matrix a = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& L = layers[i];
    cache.inputs.push_back(a);
    Matrix z = L.weight * a;
    z.colwise() += L.bias;
    if (L.rank() > 0) {
      Matrix br = L.lora_b * a;
      z.noalias() += L.scale * (L.lora_a * br);
      cache.lowrank.push_back(std::move(br));
    } else {
      cache.lowrank.emplace_back();
    }
    if (tanh_hidden && i + 1 < layers.size()) z = z.array().tanh().matrix();
    a = std::move(z);
  }
  cache.output = a;
  return a;
}

void backward(const std::vector<LoraLinear>& layers, const Cache& cache, Matrix delta,
              bool tanh_hidden, std::vector<LayerGrad>& grads) {
  grads.resize(layers.size());
  for (std::size_t i = layers.size(); i-- > 0;) {
    const auto& L = layers[i];
    const Matrix& in = cache.inputs[i];
    auto& g = grads[i];
    g.weight = delta * in.transpose();
    g.bias = delta.rowwise().sum();
    if (L.rank() > 0) {
      g.lora_a = L.scale * delta * cache.lowrank[i].transpose();
      g.lora_b = L.scale * (L.lora_a.transpose() * delta) * in.transpose();
    } else {
      g.lora_a.resize(L.lora_a.rows(), 0);
      g.lora_b.resize(0, L.lora_b.cols());
    }
    if (i == 0) break;
    Matrix prev = L.weight.transpose() * delta;
    if (L.rank() > 0) prev.noalias() += L.scale * (L.lora_b.transpose() * (L.lora_a.transpose() * delta));
    if (tanh_hidden) prev.array() *= (1.0 - in.array().square());
    delta = std::move(prev);
  }
}

// Slot assignment used for training: IoU matches first, then each leftover
// ground-truth box takes the closest free slot by squared coordinate distance.
std::vector<std::pair<std::size_t, std::size_t>> assign_slots(std::span<const ScoredBox> pred,
                                                              std::span<const Box> gt) {
  auto assigned = match_boxes(pred, gt);
  std::vector<bool> used_p(pred.size(), false), used_g(gt.size(), false);
  for (const auto& [p, g] : assigned) used_p[p] = used_g[g] = true;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (used_g[g]) continue;
    std::size_t best = pred.size();
    double best_d = std::numeric_limits<double>::infinity();
    const auto gc = gt[g].coords();
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if (used_p[p]) continue;
      const auto pc = pred[p].box.coords();
      double d = 0.0;
      for (std::size_t c = 0; c < 4; ++c) d += (pc[c] - gc[c]) * (pc[c] - gc[c]);
      if (d < best_d) {
        best_d = d;
        best = p;
      }
    }
    if (best == pred.size()) break;
    used_p[best] = true;
    assigned.emplace_back(best, g);
  }
  return assigned;
}

}  // namespace

BatchEval evaluate_batch(const Heads& heads, const Matrix& features, const Targets& targets,
                         std::span<const std::size_t> rows, const losses::LossConfig& cfg,
                         bool with_grad) {
  if (rows.empty()) fail(ErrorKind::kShape, "empty batch");
  const auto b = static_cast<Eigen::Index>(rows.size());
  Matrix x(features.cols(), b);
  for (Eigen::Index i = 0; i < b; ++i) x.col(i) = features.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)])).transpose();
  const double inv_b = 1.0 / static_cast<double>(b);

  BatchEval out;
  if (cfg.lambda_binary > 0.0) {
    Cache cache;
    const Matrix z = forward_cached(heads.detection.layers, x, true, cache);
    Matrix delta(1, b);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
      const double p = sigmoid(z(0, i));
      const bool t = targets.manipulated[rows[static_cast<std::size_t>(i)]] != 0;
      const auto fl = losses::focal_loss(p, t, cfg.alpha, cfg.gamma);
      sum += fl.loss;
      delta(0, i) = cfg.lambda_binary * inv_b * fl.grad * p * (1.0 - p);
    }
    out.parts.binary = sum * inv_b;
    if (with_grad) backward(heads.detection.layers, cache, std::move(delta), true, out.grad.detection);
  }
  if (cfg.lambda_cue > 0.0) {
    Cache cache;
    const Matrix z = forward_cached(heads.cue.layers, x, true, cache);
    Matrix delta = Matrix::Zero(z.rows(), b);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
      const int t = targets.cue[rows[static_cast<std::size_t>(i)]];
      if (t < 0) continue;
      const auto ce = losses::cue_cross_entropy(z.col(i), static_cast<std::size_t>(t));
      sum += ce.loss;
      delta.col(i) = cfg.lambda_cue * inv_b * ce.grad;
    }
    out.parts.cue = sum * inv_b;
    if (with_grad) backward(heads.cue.layers, cache, std::move(delta), true, out.grad.cue);
  }
  if (cfg.lambda_bbox > 0.0) {
    Cache cache;
    const Matrix z = forward_cached(heads.localization.layers, x, true, cache);
    Matrix delta = Matrix::Zero(z.rows(), b);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
      const auto& gt = targets.boxes[rows[static_cast<std::size_t>(i)]];
      const SlotDecode dec = decode_slots(z.col(i));
      const std::size_t k = dec.boxes.size();
      const auto assigned = assign_slots(dec.boxes, gt);
      std::vector<bool> positive(k, false);
      for (const auto& [p, g] : assigned) positive[p] = true;

      if (!assigned.empty()) {
        std::vector<Box> pb, gb;
        for (const auto& [p, g] : assigned) {
          pb.push_back(dec.boxes[p].box);
          gb.push_back(gt[g]);
        }
        const auto mse = losses::bbox_mse(pb, gb);
        sum += mse.loss;
        for (std::size_t m = 0; m < assigned.size(); ++m) {
          const std::size_t s = assigned[m].first;
          const auto& q = dec.squashed[s];
          const auto& gc = mse.grad[m];
          // Undo canonicalization: the min coordinate may come from either raw slot.
          const std::array<std::size_t, 4> src = {
              dec.swapped[s][0] ? 2u : 0u, dec.swapped[s][1] ? 3u : 1u,
              dec.swapped[s][0] ? 0u : 2u, dec.swapped[s][1] ? 1u : 3u};
          for (std::size_t c = 0; c < 4; ++c) {
            const std::size_t r = src[c];
            delta(static_cast<Eigen::Index>(5 * s + r), i) +=
                cfg.lambda_bbox * inv_b * gc[c] * q[r] * (1.0 - q[r]);
          }
        }
      }
      const double inv_k = 1.0 / static_cast<double>(k);
      for (std::size_t s = 0; s < k; ++s) {
        const double c = dec.squashed[s][4];
        const auto fl = losses::focal_loss(c, positive[s], cfg.alpha, cfg.gamma);
        sum += fl.loss * inv_k;
        delta(static_cast<Eigen::Index>(5 * s + 4), i) +=
            cfg.lambda_bbox * inv_b * inv_k * fl.grad * c * (1.0 - c);
      }
    }
    out.parts.bbox = sum * inv_b;
    if (with_grad) backward(heads.localization.layers, cache, std::move(delta), true, out.grad.localization);
  }
  out.total = losses::total_loss(out.parts, cfg);
  return out;
}

namespace {

class Schedule {
 public:
  Schedule(const TrainConfig& cfg, std::size_t total_steps)
      : lr_(cfg.learning_rate),
        warmup_(static_cast<std::size_t>(
            std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps)))) {}

  double at(std::size_t step) const {
    if (warmup_ == 0 || step >= warmup_) return lr_;
    return lr_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  }

 private:
  double lr_;
  std::size_t warmup_;
};

void apply(std::vector<LoraLinear>& layers, const std::vector<LayerGrad>& grads, double lr,
           double decay) {
  if (grads.empty() || lr == 0.0) return;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& L = layers[i];
    const auto& g = grads[i];
    if (L.train_base) {
      L.weight -= lr * (g.weight + decay * L.weight);
      L.bias -= lr * g.bias;
    }
    if (L.rank() > 0) {
      L.lora_a -= lr * (g.lora_a + decay * L.lora_a);
      L.lora_b -= lr * (g.lora_b + decay * L.lora_b);
    }
  }
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

}  // namespace

TrainResult train(const Matrix& features, const Targets& targets, const TrainConfig& cfg,
                  const losses::LossConfig& loss_cfg, const HeadsConfig& heads_cfg) {
  HeadsConfig hc = heads_cfg;
  hc.input_dim = static_cast<std::size_t>(features.cols());
  return train(init_heads(hc, cfg.seed), features, targets, cfg, loss_cfg);
}

TrainResult train(Heads heads, const Matrix& features, const Targets& targets,
                  const TrainConfig& cfg, const losses::LossConfig& loss_cfg) {
  cfg.validate();
  loss_cfg.validate();
  const auto n = static_cast<std::size_t>(features.rows());
  targets.validate(n, heads.num_cues());
  if (static_cast<std::size_t>(features.cols()) != heads.input_dim()) {
    fail(ErrorKind::kShape, "feature dim does not match decoder input dim");
  }
  const auto positives = static_cast<std::size_t>(
      std::count_if(targets.manipulated.begin(), targets.manipulated.end(), [](auto v) { return v != 0; }));
  if (positives < 2 || n - positives < 2) {
    fail(ErrorKind::kClassBalance, "training needs at least 2 samples of each class");
  }

  const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);
  const Schedule schedule(cfg, per_epoch * cfg.epochs);
  Rng rng(cfg.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.curve.reserve(per_epoch * cfg.epochs);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(std::span(order), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      BatchEval ev = evaluate_batch(heads, features, targets, rows, loss_cfg, true);
      if (!std::isfinite(ev.total)) {
        fail(ErrorKind::kDivergence, "non-finite loss at step " + std::to_string(step));
      }
      result.curve.push_back({step, ev.total, ev.parts.binary, ev.parts.bbox, ev.parts.cue});
      const double lr = schedule.at(step);
      apply(heads.detection.layers, ev.grad.detection, lr, cfg.weight_decay);
      apply(heads.cue.layers, ev.grad.cue, lr, cfg.weight_decay);
      apply(heads.localization.layers, ev.grad.localization, lr, cfg.weight_decay);
    }
  }
  result.heads = std::move(heads);
  return result;
}

Matrix Projector::forward(const Matrix& x) const {
  Matrix a = x;
  for (const auto& L : layers) a = L.forward(a);
  return a;
}

Projector identity_projector(std::size_t dim) {
  const auto d = static_cast<Eigen::Index>(dim);
  Projector p;
  p.layers.push_back(LoraLinear::affine(Matrix::Identity(d, d), Vector::Zero(d)));
  p.layers.back().train_base = false;
  return p;
}

Projector adapted_projector(const Matrix& base, std::size_t rank, double alpha, std::uint64_t seed) {
  Rng rng(seed);
  Projector p;
  p.layers.push_back(LoraLinear::adapted(base, rank, alpha, rng));
  return p;
}

std::vector<std::pair<std::size_t, std::size_t>> collect_pairs(
    std::span<const features::SampleLabel> labels) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_pair;
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i].pair_id) continue;
    auto [it, fresh] = by_pair.try_emplace(*labels[i].pair_id, kNone, kNone);
    auto& slot = labels[i].is_manipulated ? it->second.second : it->second.first;
    slot = i;
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& [id, p] : by_pair) {
    if (p.first != kNone && p.second != kNone) out.push_back(p);
  }
  return out;
}

namespace {

losses::ContrastiveBatch make_batch(const Matrix& projected,
                                    std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  losses::ContrastiveBatch batch;
  batch.embeddings.resize(static_cast<Eigen::Index>(2 * pairs.size()), projected.rows());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    batch.embeddings.row(static_cast<Eigen::Index>(2 * i)) =
        projected.col(static_cast<Eigen::Index>(pairs[i].first)).transpose();
    batch.embeddings.row(static_cast<Eigen::Index>(2 * i + 1)) =
        projected.col(static_cast<Eigen::Index>(pairs[i].second)).transpose();
    batch.pairs.emplace_back(2 * i, 2 * i + 1);
  }
  return batch;
}

}  // namespace

double projector_loss(const Projector& projector, const Matrix& features,
                      std::span<const std::pair<std::size_t, std::size_t>> pairs, double tau) {
  const Matrix projected = projector.forward(features.transpose());
  return losses::contrastive_loss(make_batch(projected, pairs), tau).loss;
}

PairSimilarity pair_similarity(const Projector& projector, const Matrix& features,
                               std::span<const std::pair<std::size_t, std::size_t>> pairs) {
  if (pairs.size() < 2) fail(ErrorKind::kData, "need at least 2 pairs");
  Matrix y = projector.forward(features.transpose());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double n = y.col(c).norm();
    if (!(n > 0.0)) fail(ErrorKind::kDomain, "projected embedding has zero norm");
    y.col(c) /= n;
  }
  PairSimilarity s;
  double neg = 0.0;
  std::size_t neg_count = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto ri = static_cast<Eigen::Index>(pairs[i].first);
    const auto fi = static_cast<Eigen::Index>(pairs[i].second);
    s.positive += y.col(ri).dot(y.col(fi));
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      if (j == i) continue;
      neg += y.col(ri).dot(y.col(static_cast<Eigen::Index>(pairs[j].first)));
      neg += y.col(ri).dot(y.col(static_cast<Eigen::Index>(pairs[j].second)));
      neg_count += 2;
    }
  }
  s.positive /= static_cast<double>(pairs.size());
  s.negative = neg / static_cast<double>(neg_count);
  return s;
}

PretrainResult contrastive_pretrain(Projector projector, const Matrix& features,
                                    std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                    const TrainConfig& cfg, double tau) {
  cfg.validate();
  if (pairs.empty()) fail(ErrorKind::kData, "no real/manipulated pairs found");
  if (pairs.size() < 2) fail(ErrorKind::kData, "contrastive pretraining needs at least 2 pairs");
  if (static_cast<std::size_t>(features.cols()) != projector.input_dim()) {
    fail(ErrorKind::kShape, "feature dim does not match projector input dim");
  }
  const std::size_t batch = std::max<std::size_t>(2, cfg.batch_size);
  // A trailing batch with a single pair has no negatives; fold it into the previous one.
  std::size_t per_epoch = pairs.size() / batch;
  if (per_epoch == 0) per_epoch = 1;
  const Schedule schedule(cfg, per_epoch * cfg.epochs);
  Rng rng(cfg.seed ^ 0xC0FFEEULL);
  std::vector<std::pair<std::size_t, std::size_t>> order(pairs.begin(), pairs.end());

  PretrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(std::span(order), rng);
    for (std::size_t bi = 0; bi < per_epoch; ++bi, ++step) {
      const std::size_t start = bi * batch;
      const std::size_t end = bi + 1 == per_epoch ? order.size() : start + batch;
      const std::span<const std::pair<std::size_t, std::size_t>> chunk(order.data() + start, end - start);

      Matrix x(features.cols(), static_cast<Eigen::Index>(2 * chunk.size()));
      std::vector<std::pair<std::size_t, std::size_t>> local;
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        x.col(static_cast<Eigen::Index>(2 * i)) = features.row(static_cast<Eigen::Index>(chunk[i].first)).transpose();
        x.col(static_cast<Eigen::Index>(2 * i + 1)) = features.row(static_cast<Eigen::Index>(chunk[i].second)).transpose();
        local.emplace_back(2 * i, 2 * i + 1);
      }
      Cache cache;
      const Matrix y = forward_cached(projector.layers, x, false, cache);
      losses::ContrastiveBatch cb;
      cb.embeddings = y.transpose();
      cb.pairs = local;
      const auto loss = losses::contrastive_loss(cb, tau);
      if (!std::isfinite(loss.loss)) {
        fail(ErrorKind::kDivergence, "non-finite contrastive loss at step " + std::to_string(step));
      }
      result.curve.push_back(loss.loss);
      std::vector<LayerGrad> grads;
      backward(projector.layers, cache, loss.grad.transpose(), false, grads);
      apply(projector.layers, grads, schedule.at(step), cfg.weight_decay);
    }
  }
  result.projector = std::move(projector);
  return result;
}

Matrix layer_matrix(const features::FeatureDump& dump, std::size_t layer) {
  if (layer >= dump.num_layers()) fail(ErrorKind::kIndex, "layer index out of range");
  Matrix m(static_cast<Eigen::Index>(dump.num_samples()), static_cast<Eigen::Index>(dump.dim()));
  for (std::size_t s = 0; s < dump.num_samples(); ++s) {
    const auto r = dump.row(s, layer);
    for (std::size_t d = 0; d < dump.dim(); ++d) {
      m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(d)) = r[d];
    }
  }
  return m;
}

namespace {

void put_matrix(std::ostream& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) binary_io::put_f32(out, m(i, j));
  }
}

Matrix get_matrix(std::istream& in, std::size_t rows, std::size_t cols) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const float v = binary_io::get_f32(in, "checkpoint payload");
      if (!std::isfinite(v)) fail(ErrorKind::kData, "non-finite checkpoint parameter");
      m(i, j) = v;
    }
  }
  return m;
}

void put_layers(std::ostream& out, HeadKind kind, const std::vector<LoraLinear>& layers) {
  binary_io::put_u32(out, static_cast<std::uint32_t>(kind));
  binary_io::put_u32(out, static_cast<std::uint32_t>(layers.size()));
  for (const auto& L : layers) {
    binary_io::put_u32(out, static_cast<std::uint32_t>(L.out_dim()));
    binary_io::put_u32(out, static_cast<std::uint32_t>(L.in_dim()));
    binary_io::put_u32(out, static_cast<std::uint32_t>(L.rank()));
    binary_io::put_u32(out, L.train_base ? 1u : 0u);
    binary_io::put_f32(out, L.scale);
    put_matrix(out, L.weight);
    put_matrix(out, L.bias);
    put_matrix(out, L.lora_a);
    put_matrix(out, L.lora_b);
  }
}

std::pair<HeadKind, std::vector<LoraLinear>> get_layers(std::istream& in) {
  const std::uint32_t kind = binary_io::get_u32(in, "head kind");
  if (kind > static_cast<std::uint32_t>(HeadKind::kProjector)) {
    fail(ErrorKind::kFormat, "unknown head kind " + std::to_string(kind));
  }
  const std::uint32_t count = binary_io::get_u32(in, "layer count");
  std::vector<LoraLinear> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t out = binary_io::get_u32(in, "layer rows");
    const std::size_t inn = binary_io::get_u32(in, "layer cols");
    const std::size_t rank = binary_io::get_u32(in, "layer rank");
    LoraLinear L;
    L.train_base = binary_io::get_u32(in, "layer flags") != 0;
    L.scale = binary_io::get_f32(in, "layer scale");
    L.weight = get_matrix(in, out, inn);
    L.bias = get_matrix(in, out, 1);
    L.lora_a = get_matrix(in, out, rank);
    L.lora_b = get_matrix(in, rank, inn);
    L.validate();
    layers.push_back(std::move(L));
  }
  return {static_cast<HeadKind>(kind), std::move(layers)};
}

void put_header(std::ostream& out, std::uint32_t heads) {
  out.write(kCheckpointMagic, 4);
  binary_io::put_u32(out, kCheckpointVersion);
  binary_io::put_u32(out, heads);
}

std::uint32_t get_header(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    fail(ErrorKind::kFormat, "bad checkpoint magic");
  }
  const std::uint32_t version = binary_io::get_u32(in, "version");
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version));
  }
  return binary_io::get_u32(in, "head count");
}

}  // namespace

void save_heads(const Heads& heads, std::ostream& out) {
  put_header(out, 3);
  put_layers(out, HeadKind::kDetection, heads.detection.layers);
  put_layers(out, HeadKind::kCue, heads.cue.layers);
  put_layers(out, HeadKind::kLocalization, heads.localization.layers);
  out.flush();
  if (!out) fail(ErrorKind::kIo, "failed writing checkpoint");
}

Heads load_heads(std::istream& in) {
  const std::uint32_t count = get_header(in);
  Heads h;
  bool seen[3] = {false, false, false};
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [kind, layers] = get_layers(in);
    if (kind == HeadKind::kProjector) fail(ErrorKind::kFormat, "projector found in heads checkpoint");
    DecoderHead head{kind, std::move(layers)};
    seen[static_cast<std::size_t>(kind)] = true;
    switch (kind) {
      case HeadKind::kDetection: h.detection = std::move(head); break;
      case HeadKind::kCue: h.cue = std::move(head); break;
      default: h.localization = std::move(head); break;
    }
  }
  if (!seen[0] || !seen[1] || !seen[2]) fail(ErrorKind::kFormat, "checkpoint is missing a head");
  return h;
}

void save_projector(const Projector& projector, std::ostream& out) {
  put_header(out, 1);
  put_layers(out, HeadKind::kProjector, projector.layers);
  out.flush();
  if (!out) fail(ErrorKind::kIo, "failed writing checkpoint");
}

Projector load_projector(std::istream& in) {
  if (get_header(in) != 1) fail(ErrorKind::kFormat, "projector checkpoint must hold one head");
  auto [kind, layers] = get_layers(in);
  if (kind != HeadKind::kProjector) fail(ErrorKind::kFormat, "checkpoint does not hold a projector");
  return Projector{std::move(layers)};
}

void write_loss_curve(std::span<const LossRecord> curve, std::ostream& out) {
  out << "step,total,binary,bbox,cue\n";
  out.precision(17);
  for (const auto& r : curve) {
    out << r.step << ',' << r.total << ',' << r.binary << ',' << r.bbox << ',' << r.cue << '\n';
  }
}

}  // namespace manipshield::decoders
