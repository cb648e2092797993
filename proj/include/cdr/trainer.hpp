#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cdr/dataset.hpp"
#include "cdr/scorer.hpp"

namespace cdr {

struct TrainConfig {
  int batch_size = 32;
  double base_lr = 1e-3;
  double min_lr = 1e-8;
  int warmup_epochs = 2;
  double warmup_start_lr = 5e-7;
  double weight_decay = 5e-4;
  int epochs = 30;
  int patches_per_image = 10;
  std::uint64_t seed = 0;

  /// The published schedule (tuned for a pretrained backbone).
  static TrainConfig published();
  void validate() const;
};

struct OptimState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit OptimState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean absolute error and its subgradient (0 at exact equality).
LossGrad l1_loss(std::span<const double> preds, std::span<const double> labels);

/// Mean of 1 - sqrt(p_hat p) - sqrt((1 - p_hat)(1 - p)); gradient w.r.t. p.
LossGrad fidelity_loss(std::span<const double> p_hat, std::span<const double> p);
double fidelity_pair_loss(double p_hat, double p);

/// 1 / (1 + exp(score_y - score_x)), evaluated without overflow.
double model_pair_probability(double score_x, double score_y);

/// Linear warmup from warmup_start_lr to base_lr over warmup_epochs, then
/// cosine decay to min_lr at the final step.
double lr_at(std::int64_t global_step, std::int64_t steps_per_epoch, const TrainConfig& config);

/// Decoupled weight decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
void adamw_step(std::span<double> params, std::span<const double> grads, OptimState& state, double lr,
                double weight_decay);

/// Per-epoch progress callback: (epoch index from 1, lr at the epoch's last step, mean batch loss).
using EpochLogger = std::function<void(int epoch, double lr, double loss)>;

struct TrainResult {
  ScorerParams params;
  std::vector<double> epoch_losses;
};

/// Batch L1 loss over patches, with the summed gradient. Samples are processed
/// in parallel; the reduction runs in sample order so the result does not
/// depend on the thread count.
LossGrad batch_l1_gradient(const ScorerParams& params, std::span<const Patch> patches,
                           std::span<const double> labels);

struct PairRef {
  const Patch* x = nullptr;
  const Patch* y = nullptr;
  double label = 0.5;
};

/// Batch fidelity loss through the shared-weight two-stream composition.
LossGrad batch_pair_gradient(const ScorerParams& params, std::span<const PairRef> pairs);

/// Single-threaded versions of the two batch gradients, the reference the
/// parallel ones are tested against.
namespace serial {
LossGrad batch_l1_gradient(const ScorerParams& params, std::span<const Patch> patches,
                           std::span<const double> labels);
LossGrad batch_pair_gradient(const ScorerParams& params, std::span<const PairRef> pairs);
}  // namespace serial

/// Stage-1 training: each epoch shuffles the train ids, expands every image into
/// patches_per_image randomly flipped crops labelled with its rescaled MOS,
/// batches them in that order and minimises the L1 loss.
TrainResult train_single(const DatasetManifest& manifest, const Split& split, const ScorerConfig& scorer_config,
                         const TrainConfig& train_config, const EpochLogger& log = {});
TrainResult train_single_from(ScorerParams init, const DatasetManifest& manifest, const Split& split,
                              const TrainConfig& train_config, const EpochLogger& log = {});

struct PairRow {
  std::string x_id;
  std::string y_id;
  double label = 0.5;
};

/// Stage-3 training on pseudo-labelled pairs of fixed pre-cropped patches.
TrainResult train_pairwise(std::span<const PairRow> pairs, const std::map<std::string, Patch>& image_store,
                           const ScorerConfig& scorer_config, const TrainConfig& train_config,
                           const EpochLogger& log = {});
TrainResult train_pairwise_from(ScorerParams init, std::span<const PairRow> pairs,
                                const std::map<std::string, Patch>& image_store, const TrainConfig& train_config,
                                const EpochLogger& log = {});

}  // namespace cdr
