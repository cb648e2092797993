#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdr/dataset.hpp"
#include "cdr/metrics.hpp"
#include "cdr/pseudolabel.hpp"
#include "cdr/scorer.hpp"
#include "cdr/synthbench.hpp"
#include "cdr/trainer.hpp"

namespace cdr {

struct PoolConfig {
  std::string name = "pool";
  int n_images = 1000;
  std::vector<DegradationKind> kinds{DegradationKind::gaussian_blur, DegradationKind::additive_noise,
                                     DegradationKind::contrast_reduction};
  int short_side = 48;
  std::uint64_t seed = 0;
};

/// Everything an end-to-end run depends on. Stored as versioned JSON
/// (format "cdr-biqa-experiment", version 1); see README for the schema.
struct ExperimentConfig {
  static constexpr int kVersion = 1;

  std::uint64_t seed = 42;
  int image_size = 48;
  std::vector<BiasedDatasetConfig> datasets;
  PoolConfig pool;
  std::size_t n_pairs = 5000;
  std::vector<std::size_t> pair_ladder{500, 5000};
  std::vector<std::vector<std::string>> ensemble_subsets;
  ScorerConfig scorer;
  TrainConfig stage1;
  TrainConfig stage3;
  int eval_patches = 10;
  std::string output_dir = "out";

  /// Three biased datasets (blur/identity, noise/sqrt, mixed/square, 300
  /// images each), a 1000-image pool, 32x32 patches, hidden 64, 5000 pairs,
  /// 30 stage-1 epochs and 10 stage-3 epochs.
  static ExperimentConfig reference(std::uint64_t seed = 42);

  /// Parses the JSON form. Dataset and pool seeds absent from the file are
  /// derived from the master seed and the unit name.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;

  /// Replaces the master seed and re-derives every per-unit seed from it.
  void reseed(std::uint64_t master);
  void validate() const;

  std::uint64_t unit_seed(std::string_view unit) const { return derive_seed(seed, unit); }
  const BiasedDatasetConfig& dataset(const std::string& name) const;
};

ExperimentConfig load_experiment_config(const fs::path& path);

/// state.json under the output directory: per stage, the hash of its inputs
/// and the sha256 of every file it produced (paths relative to the root).
class ArtifactStore {
 public:
  explicit ArtifactStore(fs::path root);

  const fs::path& root() const { return root_; }
  fs::path abs(const fs::path& rel) const { return root_ / rel; }

  /// True when the stage last ran with `key` and all its outputs still hash
  /// to the recorded values.
  bool up_to_date(const std::string& stage, const std::string& key) const;
  void record(const std::string& stage, const std::string& key, const std::vector<fs::path>& outputs);
  /// Throws DataError when the file no longer matches the hash recorded for it.
  void verify(const fs::path& rel) const;
  std::string recorded_hash(const fs::path& rel) const;

  /// Writes bytes to <dir>/<stem>-<first 16 hex of sha256><ext>; returns the relative path.
  fs::path put(const fs::path& dir, const std::string& stem, const std::string& ext,
               std::span<const std::uint8_t> bytes) const;

 private:
  void save() const;

  fs::path root_;
  nlohmann::json state_;
};

enum class StageStatus { ran, skipped };

struct TrainedModel {
  std::string name;
  std::string trained_on;
  fs::path path;  // relative to the output directory
  std::string sha256;
  ScorerParams params;
};

struct LoadedDataset {
  BiasedDatasetConfig config;
  DatasetManifest manifest;  // rescaled
  GroundTruth truth;
};

struct ExperimentData {
  std::vector<LoadedDataset> datasets;
  DatasetManifest pool;
  std::map<std::string, Patch> pool_crops;
};

struct PairsArtifact {
  fs::path path;
  std::string sha256;
  PairManifest manifest;
};

struct CrossEvalResult {
  CrossMatrix vs_qstar;
  CrossMatrix vs_labels;
};

struct AblationRow {
  std::string label;
  std::size_t n_pairs = 0;
  std::vector<std::string> ensemble;
  std::string pairs_sha256;
  std::string model_sha256;
  std::vector<double> srcc;  // per dataset, vs ground truth
  double mean_srcc = 0.0;
};

struct AblationReport {
  std::string kind;
  std::vector<std::string> datasets;
  std::vector<AblationRow> rows;

  nlohmann::ordered_json to_json() const;
  static AblationReport from_json(const nlohmann::json& j);
};

struct ExperimentOptions {
  bool force = false;
  std::ostream* progress = nullptr;
};

/// The full pipeline on synthetic biased datasets. Each stage runs lazily,
/// at most once per object, and is skipped when the artifact store shows it
/// up to date (unless `force`).
class Experiment {
 public:
  Experiment(ExperimentConfig config, fs::path output_dir, ExperimentOptions options = {});

  const ExperimentConfig& config() const { return config_; }
  const ArtifactStore& store() const { return store_; }

  const ExperimentData& data();
  /// One scorer per dataset, trained on its 80% split.
  const std::vector<TrainedModel>& stage1();
  /// Pair manifest labelled by the full stage-1 ensemble.
  const PairsArtifact& stage2();
  /// CDR scorer trained from scratch on the stage-2 pairs.
  const TrainedModel& stage3();
  /// (stage-1 scorers + CDR) x datasets, against q* and against the biased labels.
  const CrossEvalResult& cross_eval();
  /// Runs every stage and writes reports/summary.json; returns the summary.
  nlohmann::ordered_json run_all();

  AblationReport ablation_pairs();
  AblationReport ablation_ensemble();

  const std::map<std::string, StageStatus>& statuses() const { return statuses_; }

  /// Predictor for a scorer with the configured evaluation patch count.
  ImagePredictor predictor(const ScorerParams& params) const;
  std::vector<MatrixDataset> eval_datasets(bool against_truth);
  CrossMatrix evaluate(const std::vector<MatrixModel>& models, bool against_truth);
  /// Mean fidelity loss of `params` over a pair manifest's rows.
  double pair_loss(const ScorerParams& params, const PairManifest& pairs);

 private:
  void progress(const std::string& line) const;
  EpochLogger epoch_logger(const std::string& stage);
  StageStatus status(const std::string& stage, bool ran);
  EnsembleSnapshot snapshot(const std::vector<std::string>& names);
  TrainedModel train_cdr(const PairManifest& pairs, const std::string& stem, const std::string& stage);
  std::string dataset_digest();

  ExperimentConfig config_;
  ExperimentOptions options_;
  ArtifactStore store_;
  std::map<std::string, StageStatus> statuses_;
  std::optional<ExperimentData> data_;
  std::optional<std::vector<TrainedModel>> stage1_;
  std::optional<PairsArtifact> stage2_;
  std::optional<TrainedModel> stage3_;
  std::optional<CrossEvalResult> cross_;
};

}  // namespace cdr
