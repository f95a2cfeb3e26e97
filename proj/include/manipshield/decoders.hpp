#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "manipshield/feature_store.hpp"
#include "manipshield/geometry.hpp"
#include "manipshield/losses.hpp"
#include "manipshield/rng.hpp"

namespace manipshield::decoders {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// h = (W + scale * A * B) x + bias, with W d x k, A d x r, B r x k.
// Rank 0 is a plain affine layer.
struct LoraLinear {
  Matrix weight;
  Vector bias;
  Matrix lora_a;
  Matrix lora_b;
  double scale = 1.0;
  // When false only the adapter (A, B) is trained; W and bias stay frozen.
  bool train_base = true;

  static LoraLinear affine(Matrix weight, Vector bias);
  // Frozen base with a fresh adapter: A ~ small Gaussian, B = 0, scale = alpha / rank.
  static LoraLinear adapted(Matrix weight, std::size_t rank, double alpha, Rng& rng);

  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t rank() const { return static_cast<std::size_t>(lora_a.cols()); }

  // Shape invariants; throws kShape.
  void validate() const;

  Matrix merged() const;
  // Columns of x are samples.
  Matrix forward(const Matrix& x) const;
};

// Base path plus the low-rank path evaluated as scale * A (B x).
Vector lora_forward(const LoraLinear& layer, const Vector& x);

enum class HeadKind : std::uint32_t { kDetection = 0, kCue = 1, kLocalization = 2, kProjector = 3 };

const char* to_string(HeadKind kind);

// Affine layers with tanh between them (none after the last).
struct DecoderHead {
  HeadKind kind = HeadKind::kDetection;
  std::vector<LoraLinear> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  Matrix forward(const Matrix& x) const;
};

struct HeadsConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden = {256, 64};
  std::size_t num_cues = 12;
  std::size_t max_boxes = 8;
  bool zero_init_output = true;
};

struct Heads {
  DecoderHead detection;
  DecoderHead cue;
  DecoderHead localization;

  std::size_t input_dim() const { return detection.input_dim(); }
  std::size_t max_boxes() const { return localization.output_dim() / 5; }
  std::size_t num_cues() const { return cue.output_dim(); }
};

Heads init_heads(const HeadsConfig& config, std::uint64_t seed);

struct ScoredBox {
  Box box;
  double confidence = 0.0;
};

struct Prediction {
  double p_manipulated = 0.5;
  Vector cue_logits;
  std::vector<ScoredBox> boxes;
};

Prediction forward_heads(const Vector& features, const Heads& heads);
std::vector<Prediction> forward_heads(const Matrix& features_by_row, const Heads& heads);

// Greedy one-to-one matching in descending IoU order. Pairs with IoU 0 are
// never matched. Returns (pred index, gt index).
std::vector<std::pair<std::size_t, std::size_t>> match_boxes(std::span<const ScoredBox> pred,
                                                             std::span<const Box> gt);

struct TrainConfig {
  double learning_rate = 1e-5;
  std::size_t batch_size = 16;
  double warmup_ratio = 0.05;
  double weight_decay = 0.1;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t lora_rank = 16;
  double lora_alpha = 32.0;

  void validate() const;
};

// Per-sample supervision. cue < 0 means no cue label.
struct Targets {
  std::vector<std::uint8_t> manipulated;
  std::vector<int> cue;
  std::vector<std::vector<Box>> boxes;

  std::size_t size() const { return manipulated.size(); }
  void validate(std::size_t num_samples, std::size_t num_cues) const;
};

struct LossRecord {
  std::size_t step = 0;
  double total = 0.0;
  double binary = 0.0;
  double bbox = 0.0;
  double cue = 0.0;
};

struct LayerGrad {
  Matrix weight;
  Vector bias;
  Matrix lora_a;
  Matrix lora_b;
};

struct HeadsGrad {
  std::vector<LayerGrad> detection;
  std::vector<LayerGrad> cue;
  std::vector<LayerGrad> localization;
};

struct BatchEval {
  losses::LossParts parts;
  double total = 0.0;
  HeadsGrad grad;
};

// L_total averaged over the rows of `features` and its gradient with respect
// to every head parameter. Heads whose loss weight is zero are skipped.
// Boxes are assigned greedily by IoU first; leftover ground truth is paired
// with the nearest free slot so slots that do not overlap yet still learn.
// The box term adds a focal confidence loss per slot (1 for assigned slots,
// 0 otherwise) averaged over slots.
BatchEval evaluate_batch(const Heads& heads, const Matrix& features, const Targets& targets,
                         std::span<const std::size_t> rows, const losses::LossConfig& loss_cfg,
                         bool with_grad = true);

struct TrainResult {
  Heads heads;
  std::vector<LossRecord> curve;
};

// Mini-batch gradient descent, linear warmup then constant rate, decoupled
// weight decay on weight matrices. Deterministic given cfg.seed.
TrainResult train(const Matrix& features, const Targets& targets, const TrainConfig& cfg,
                  const losses::LossConfig& loss_cfg, const HeadsConfig& heads_cfg);
TrainResult train(Heads heads, const Matrix& features, const Targets& targets,
                  const TrainConfig& cfg, const losses::LossConfig& loss_cfg);

// Stack of linear layers (no nonlinearity) used for contrastive pretraining.
struct Projector {
  std::vector<LoraLinear> layers;

  Matrix forward(const Matrix& x) const;
  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
};

Projector identity_projector(std::size_t dim);
Projector adapted_projector(const Matrix& base, std::size_t rank, double alpha, std::uint64_t seed);

// Row indices of (real, manipulated) samples linked by pair_id.
std::vector<std::pair<std::size_t, std::size_t>> collect_pairs(
    std::span<const features::SampleLabel> labels);

// Contrastive loss of the projected features over the given pairs, the real
// member anchoring each pair.
double projector_loss(const Projector& projector, const Matrix& features,
                      std::span<const std::pair<std::size_t, std::size_t>> pairs, double tau);

struct PairSimilarity {
  double positive = 0.0;
  double negative = 0.0;
};

// Mean cosine similarity of projected positive pairs and of all cross-pair
// combinations.
PairSimilarity pair_similarity(const Projector& projector, const Matrix& features,
                               std::span<const std::pair<std::size_t, std::size_t>> pairs);

struct PretrainResult {
  Projector projector;
  std::vector<double> curve;
};

PretrainResult contrastive_pretrain(Projector projector, const Matrix& features,
                                    std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                    const TrainConfig& cfg, double tau);

// Rows = samples, columns = dims, from one layer of a dump.
Matrix layer_matrix(const features::FeatureDump& dump, std::size_t layer);

// MSHD checkpoint: magic, version, head count, then per head its kind and
// layers (out, in, rank as u32, scale as f32, then W, bias, A, B as f32,
// row-major, little-endian).
inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'H', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_heads(const Heads& heads, std::ostream& out);
Heads load_heads(std::istream& in);
void save_projector(const Projector& projector, std::ostream& out);
Projector load_projector(std::istream& in);

void write_loss_curve(std::span<const LossRecord> curve, std::ostream& out);

}  // namespace manipshield::decoders
