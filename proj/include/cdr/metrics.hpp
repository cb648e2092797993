#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdr/dataset.hpp"

namespace cdr {

/// Five-parameter monotone logistic remap fitted before PLCC:
///   b1 (1/2 - 1/(1 + exp(b2 (s - b3)))) + b4 s + b5
struct LogisticParams {
  std::array<double, 5> beta{0.0, 1.0, 0.0, 1.0, 0.0};
};

struct EvalReport {
  std::string model;
  std::string trained_on;
  std::string dataset;
  std::size_t n = 0;
  double srcc = 0.0;
  double plcc = 0.0;
  double raw_pearson = 0.0;
  LogisticParams betas;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Fractional (average) ranks, 1-based.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation of average ranks.
double srcc(std::span<const double> x, std::span<const double> y);

/// 1 - 6 sum d^2 / (N (N^2 - 1)); only valid without ties.
double srcc_closed_form(std::span<const double> x, std::span<const double> y);

double pearson(std::span<const double> x, std::span<const double> y);

double logistic_map(double s_hat, const LogisticParams& params);

struct FitTrace {
  std::vector<double> accepted_sse;  // SSE after each accepted step, starting with the initial guess
  int iterations = 0;
  bool used_affine_fallback = false;
};

/// Levenberg-Marquardt least squares fit of the logistic remap of `preds` onto
/// `mos`. Starts from b1 = range(mos), b2 = sign(r) 4/std(preds), b3 = mean(preds),
/// b4 = 0, b5 = mean(mos); damping 1e-3, x10 on reject and /10 on accept;
/// stops on relative SSE improvement < 1e-10 or after 200 iterations. Falls
/// back to the affine fit (b1 = 0) when that is no worse. Iterates on
/// standardized predictions, so the fit is equivariant under affine changes
/// of `preds`.
LogisticParams fit_logistic(std::span<const double> preds, std::span<const double> mos, FitTrace* trace = nullptr);

struct PlccResult {
  double plcc = 0.0;
  LogisticParams betas;
};

PlccResult plcc(std::span<const double> preds, std::span<const double> mos);

/// Fills srcc, plcc, raw_pearson, betas and n.
EvalReport evaluate_predictions(std::span<const double> preds, std::span<const double> targets);

/// Trains on split.train_ids and returns predictions for split.test_ids, in that order.
using SplitTrainFn = std::function<std::vector<double>(const DatasetManifest&, const Split&)>;

struct RepeatedSplitResult {
  EvalReport median;
  std::vector<EvalReport> runs;
};

/// k random 80/20 splits with seeds derive_seed(base_seed, "split", r). SRCC and
/// PLCC medians are taken independently; betas/raw_pearson come from the run
/// holding the median PLCC (lower middle for even k).
RepeatedSplitResult repeated_split_eval(const DatasetManifest& manifest, const SplitTrainFn& train_fn, int k,
                                        std::uint64_t base_seed);

/// Anything that maps an image to a quality score. `image_seed` fixes the
/// random crops so every model sees the same patches of an image.
using ImagePredictor = std::function<double(const ImageRecord& record, std::uint64_t image_seed)>;

struct MatrixModel {
  std::string name;
  std::string trained_on;  // empty for models with no home dataset
  ImagePredictor predict;
};

struct MatrixDataset {
  std::string name;
  const DatasetManifest* manifest = nullptr;
  std::map<std::string, double> targets;  // id -> evaluation target
};

struct CrossMatrix {
  std::vector<std::string> datasets;
  std::vector<std::vector<EvalReport>> cells;  // [model][dataset]

  nlohmann::ordered_json to_json() const;
  static CrossMatrix from_json(const nlohmann::json& j);
  /// Rows (model, trained_on); columns <dataset>_SRCC, <dataset>_PLCC; 6 decimals.
  std::string to_csv() const;
  /// Mean SRCC of a row excluding the column named `exclude` (if any).
  double mean_srcc(std::size_t row, const std::string& exclude = {}) const;
};

/// Evaluates every model on every full dataset, no retraining.
CrossMatrix cross_dataset_matrix(std::span<const MatrixModel> models, std::span<const MatrixDataset> datasets,
                                 std::uint64_t seed);

}  // namespace cdr
