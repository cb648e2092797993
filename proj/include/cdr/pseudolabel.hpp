#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdr/dataset.hpp"
#include "cdr/scorer.hpp"
#include "cdr/trainer.hpp"

namespace cdr {

struct EnsembleMember {
  std::string source;      // dataset the scorer was trained on
  std::string model_hash;  // sha256 of the serialized model
  ScorerParams params;
};

struct EnsembleSnapshot {
  std::vector<EnsembleMember> members;

  static EnsembleMember member(std::string source, ScorerParams params);
  void validate() const;
};

struct PairSample {
  std::string x_id;
  std::string y_id;
  double p_r = 0.5;
  std::vector<double> per_model;  // empty unless retained
};

struct PairManifest {
  std::string pool;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> ensemble;  // (source, model hash)
  std::vector<PairSample> pairs;

  std::size_t n_pairs() const { return pairs.size(); }
  std::vector<PairRow> rows() const;
};

/// Central-crop preprocessing applied to every pool image before scoring.
struct PoolPreprocess {
  int short_side = 48;
  int crop = 32;
};

/// 1 / (1 + exp(q_y - q_x)); the exponent is always taken of a non-positive
/// argument so large differences cannot overflow.
double relative_prob(double q_x, double q_y);

/// Arithmetic mean of the per-model probabilities.
double ensemble_pseudolabel(std::span<const double> per_model_probs);

struct ScoreTable {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> scores;  // [model][image], ids order

  double at(std::size_t model, std::size_t image) const { return scores[model][image]; }
};

/// Central crops for every image, keyed by id.
std::map<std::string, Patch> central_crops(const DatasetManifest& pool, const PoolPreprocess& prep);

/// Scores each image once per model on its central crop.
ScoreTable score_pool(const EnsembleSnapshot& snapshot, std::span<const std::string> image_ids,
                      const std::map<std::string, Patch>& image_store);

/// Ordered pairs (x != y) drawn uniformly without replacement. Pair index k in
/// [0, N(N-1)) maps to x = k / (N-1), y = r < x ? r : r + 1 with r = k % (N-1);
/// the i-th output is the image of i under a seeded Feistel permutation of the
/// index space (cycle-walking), so a shorter list is a prefix of a longer one.
std::vector<std::pair<std::size_t, std::size_t>> sample_pair_indices(std::size_t n_images, std::size_t n_pairs,
                                                                     std::uint64_t seed);
std::vector<std::pair<std::string, std::string>> sample_pairs(std::span<const std::string> image_ids,
                                                              std::size_t n_pairs, std::uint64_t seed);

/// score_pool -> sample_pairs -> relative_prob per model -> ensemble mean.
/// Image ids are taken in sorted order.
PairManifest generate_pair_manifest(const EnsembleSnapshot& snapshot, const DatasetManifest& pool,
                                    std::size_t n_pairs, std::uint64_t seed, bool keep_per_model,
                                    const PoolPreprocess& prep);

/// CSV `x_id,y_id,p_r[,p_r_1..p_r_N]` plus a `<stem>.json` sidecar.
void write_pair_manifest(const PairManifest& manifest, const fs::path& csv_path);
PairManifest read_pair_manifest(const fs::path& csv_path);
fs::path sidecar_path(const fs::path& csv_path);

}  // namespace cdr
