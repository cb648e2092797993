#include "cdr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cdr/error.hpp"

namespace cdr {

TrainConfig TrainConfig::published() {
  TrainConfig c;
  c.base_lr = 2e-5;
  return c;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw DataError("batch size must be positive");
  if (epochs < 1) throw DataError("epoch count must be positive");
  if (patches_per_image < 1) throw DataError("patches per image must be positive");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) throw DataError("warmup epochs must be in [0, epochs)");
  for (double r : {base_lr, min_lr, warmup_start_lr, weight_decay}) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw DataError("learning rates and weight decay must be finite and >= 0");
  }
}

LossGrad l1_loss(std::span<const double> preds, std::span<const double> labels) {
  if (preds.empty() || preds.size() != labels.size()) throw DataError("l1 loss needs equal, non-empty inputs");
  const double n = static_cast<double>(preds.size());
  LossGrad out;
  out.grad.resize(preds.size());
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - labels[i];
    total += std::abs(d);
    out.grad[i] = (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / n;
  }
  out.loss = total / n;
  return out;
}

double fidelity_pair_loss(double p_hat, double p) {
  return 1.0 - std::sqrt(p_hat * p) - std::sqrt((1.0 - p_hat) * (1.0 - p));
}

LossGrad fidelity_loss(std::span<const double> p_hat, std::span<const double> p) {
  if (p.empty() || p.size() != p_hat.size()) throw DataError("fidelity loss needs equal, non-empty inputs");
  const double n = static_cast<double>(p.size());
  LossGrad out;
  out.grad.resize(p.size());
  double total = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double t = p_hat[k];
    const double q = p[k];
    if (!(q > 0.0 && q < 1.0)) throw NumericalError("model probability outside (0, 1)");
    if (!(t >= 0.0 && t <= 1.0)) throw DataError("pseudo-label outside [0, 1]");
    total += fidelity_pair_loss(t, q);
    // d/dq [-sqrt(t q) - sqrt((1-t)(1-q))]
    out.grad[k] = (-0.5 * std::sqrt(t / q) + 0.5 * std::sqrt((1.0 - t) / (1.0 - q))) / n;
  }
  out.loss = total / n;
  return out;
}

double model_pair_probability(double score_x, double score_y) {
  const double d = score_x - score_y;
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

double lr_at(std::int64_t step, std::int64_t steps_per_epoch, const TrainConfig& c) {
  const std::int64_t total = static_cast<std::int64_t>(c.epochs) * steps_per_epoch;
  const std::int64_t warm = static_cast<std::int64_t>(c.warmup_epochs) * steps_per_epoch;
  if (step < warm) {
    return c.warmup_start_lr +
           (c.base_lr - c.warmup_start_lr) * static_cast<double>(step) / static_cast<double>(warm);
  }
  const std::int64_t span = total - warm - 1;
  const double tau = span > 0 ? std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span)) : 0.0;
  return c.min_lr + 0.5 * (c.base_lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * tau));
}

void adamw_step(std::span<double> params, std::span<const double> grads, OptimState& s, double lr,
                double weight_decay) {
  if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size()) {
    throw DataError("optimizer shapes disagree");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericalError("non-finite gradient at parameter " + std::to_string(i) + " (step " +
                           std::to_string(s.t + 1) + ")");
    }
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
    const double m_hat = s.m[i] / c1;
    const double v_hat = s.v[i] / c2;
    params[i] = params[i] * decay - lr * (m_hat / (std::sqrt(v_hat) + s.eps));
  }
}

namespace {

// Sums per-sample gradient rows in sample order; parallel over parameters only.
void ordered_reduce(const std::vector<std::vector<double>>& rows, std::vector<double>& out) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (n * static_cast<std::ptrdiff_t>(rows.size()) > (1 << 16))
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (const auto& row : rows) acc += row[j];
    out[j] = acc;
  }
}

void check_finite(double loss, std::int64_t batch) {
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss in batch " + std::to_string(batch));
}

}  // namespace

LossGrad batch_l1_gradient(const ScorerParams& params, std::span<const Patch> patches,
                           std::span<const double> labels) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(patches.size());
  std::vector<ForwardResult> fwd(patches.size());
  std::vector<std::vector<double>> rows(patches.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) fwd[i] = forward(params, patches[i]);
  std::vector<double> preds(patches.size());
  for (std::size_t i = 0; i < preds.size(); ++i) preds[i] = fwd[i].score;
  LossGrad lg = l1_loss(preds, labels);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    rows[i].assign(params.values.size(), 0.0);
    backward_into(fwd[i].trace, params, lg.grad[i], rows[i]);
  }
  LossGrad out;
  out.loss = lg.loss;
  out.grad.assign(params.values.size(), 0.0);
  ordered_reduce(rows, out.grad);
  return out;
}

LossGrad batch_pair_gradient(const ScorerParams& params, std::span<const PairRef> pairs) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(pairs.size());
  std::vector<ForwardResult> fx(pairs.size());
  std::vector<ForwardResult> fy(pairs.size());
  std::vector<std::vector<double>> rows(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    fx[i] = forward(params, *pairs[i].x);
    fy[i] = forward(params, *pairs[i].y);
  }
  std::vector<double> probs(pairs.size());
  std::vector<double> labels(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    probs[i] = model_pair_probability(fx[i].score, fy[i].score);
    labels[i] = pairs[i].label;
  }
  LossGrad lg = fidelity_loss(labels, probs);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    // dp/d(score_x) = p (1 - p) = -dp/d(score_y); both streams share one gradient.
    const double d_score = lg.grad[i] * probs[i] * (1.0 - probs[i]);
    rows[i].assign(params.values.size(), 0.0);
    backward_into(fx[i].trace, params, d_score, rows[i]);
    backward_into(fy[i].trace, params, -d_score, rows[i]);
  }
  LossGrad out;
  out.loss = lg.loss;
  out.grad.assign(params.values.size(), 0.0);
  ordered_reduce(rows, out.grad);
  return out;
}

namespace serial {

LossGrad batch_l1_gradient(const ScorerParams& params, std::span<const Patch> patches,
                           std::span<const double> labels) {
  std::vector<ForwardResult> fwd;
  std::vector<double> preds;
  for (const auto& p : patches) {
    fwd.push_back(forward(params, p));
    preds.push_back(fwd.back().score);
  }
  LossGrad lg = l1_loss(preds, labels);
  LossGrad out{lg.loss, std::vector<double>(params.values.size(), 0.0)};
  std::vector<double> row(params.values.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    backward_into(fwd[i].trace, params, lg.grad[i], row);
    for (std::size_t j = 0; j < row.size(); ++j) out.grad[j] += row[j];
  }
  return out;
}

LossGrad batch_pair_gradient(const ScorerParams& params, std::span<const PairRef> pairs) {
  std::vector<ForwardResult> fx;
  std::vector<ForwardResult> fy;
  std::vector<double> probs;
  std::vector<double> labels;
  for (const auto& pr : pairs) {
    fx.push_back(forward(params, *pr.x));
    fy.push_back(forward(params, *pr.y));
    probs.push_back(model_pair_probability(fx.back().score, fy.back().score));
    labels.push_back(pr.label);
  }
  LossGrad lg = fidelity_loss(labels, probs);
  LossGrad out{lg.loss, std::vector<double>(params.values.size(), 0.0)};
  std::vector<double> row(params.values.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double d_score = lg.grad[i] * probs[i] * (1.0 - probs[i]);
    std::fill(row.begin(), row.end(), 0.0);
    backward_into(fx[i].trace, params, d_score, row);
    backward_into(fy[i].trace, params, -d_score, row);
    for (std::size_t j = 0; j < row.size(); ++j) out.grad[j] += row[j];
  }
  return out;
}

}  // namespace serial

TrainResult train_single(const DatasetManifest& manifest, const Split& split, const ScorerConfig& scorer_config,
                         const TrainConfig& train_config, const EpochLogger& log) {
  return train_single_from(init_params(scorer_config, derive_seed(train_config.seed, "init")), manifest, split,
                           train_config, log);
}

TrainResult train_single_from(ScorerParams params, const DatasetManifest& manifest, const Split& split,
                              const TrainConfig& cfg, const EpochLogger& log) {
  cfg.validate();
  if (manifest.rescaled.empty()) throw DataError("train_single needs rescaled labels (" + manifest.name + ")");
  if (split.train_ids.empty()) throw DataError("empty training split");
  std::map<std::string, const ImageRecord*> by_id;
  for (const auto& r : manifest.records) by_id[r->id] = r.get();
  for (const auto& id : split.train_ids) {
    if (!by_id.contains(id) || !manifest.rescaled.contains(id)) throw DataError("split id '" + id + "' not in manifest");
  }

  const int size = params.config.patch_size;
  const std::int64_t per_epoch = static_cast<std::int64_t>(split.train_ids.size()) * cfg.patches_per_image;
  const std::int64_t steps_per_epoch = (per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  OptimState state(params.values.size());
  Rng rng(derive_seed(cfg.seed, "epochs"));
  TrainResult result;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::string> order = split.train_ids;
    rng.shuffle(order);
    std::vector<Patch> patches;
    std::vector<double> labels;
    patches.reserve(static_cast<std::size_t>(per_epoch));
    labels.reserve(static_cast<std::size_t>(per_epoch));
    for (const auto& id : order) {
      auto crops = sample_patches(*by_id.at(id), cfg.patches_per_image, size, true, rng);
      const double label = manifest.rescaled.at(id);
      for (auto& c : crops) {
        patches.push_back(std::move(c));
        labels.push_back(label);
      }
    }
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b * cfg.batch_size);
      const std::size_t hi = std::min(patches.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      LossGrad lg = batch_l1_gradient(params, std::span(patches).subspan(lo, hi - lo),
                                      std::span(labels).subspan(lo, hi - lo));
      check_finite(lg.loss, step);
      lr = lr_at(step, steps_per_epoch, cfg);
      adamw_step(params.values, lg.grad, state, lr, cfg.weight_decay);
      loss_sum += lg.loss;
      ++step;
    }
    const double epoch_loss = loss_sum / static_cast<double>(steps_per_epoch);
    result.epoch_losses.push_back(epoch_loss);
    if (log) log(epoch + 1, lr, epoch_loss);
  }
  result.params = std::move(params);
  return result;
}

TrainResult train_pairwise(std::span<const PairRow> pairs, const std::map<std::string, Patch>& image_store,
                           const ScorerConfig& scorer_config, const TrainConfig& train_config,
                           const EpochLogger& log) {
  return train_pairwise_from(init_params(scorer_config, derive_seed(train_config.seed, "init")), pairs, image_store,
                             train_config, log);
}

TrainResult train_pairwise_from(ScorerParams params, std::span<const PairRow> pairs,
                                const std::map<std::string, Patch>& image_store, const TrainConfig& cfg,
                                const EpochLogger& log) {
  cfg.validate();
  if (pairs.empty()) throw DataError("no training pairs");
  std::vector<PairRef> refs;
  refs.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (!(p.label > 0.0 && p.label < 1.0)) throw DataError("pseudo-label outside (0, 1) for pair " + p.x_id + "," + p.y_id);
    const auto x = image_store.find(p.x_id);
    const auto y = image_store.find(p.y_id);
    if (x == image_store.end() || y == image_store.end()) {
      throw DataError("pair references an image missing from the store: " + p.x_id + "," + p.y_id);
    }
    refs.push_back({&x->second, &y->second, p.label});
  }

  const std::int64_t steps_per_epoch = (static_cast<std::int64_t>(refs.size()) + cfg.batch_size - 1) / cfg.batch_size;
  OptimState state(params.values.size());
  Rng rng(derive_seed(cfg.seed, "epochs"));
  TrainResult result;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(refs);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b * cfg.batch_size);
      const std::size_t hi = std::min(refs.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      LossGrad lg = batch_pair_gradient(params, std::span(refs).subspan(lo, hi - lo));
      check_finite(lg.loss, step);
      lr = lr_at(step, steps_per_epoch, cfg);
      adamw_step(params.values, lg.grad, state, lr, cfg.weight_decay);
      loss_sum += lg.loss;
      ++step;
    }
    const double epoch_loss = loss_sum / static_cast<double>(steps_per_epoch);
    result.epoch_losses.push_back(epoch_loss);
    if (log) log(epoch + 1, lr, epoch_loss);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace cdr
