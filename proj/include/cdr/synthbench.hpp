#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cdr/dataset.hpp"

namespace cdr {

enum class DegradationKind { gaussian_blur, additive_noise, contrast_reduction };

struct DegradationSpec {
  DegradationKind kind = DegradationKind::gaussian_blur;
  double magnitude = 0.0;  // 0 is pristine, 1 is the strongest setting
};

enum class LabelRemap { identity, sqrt, square, logistic_steep };

std::string_view to_string(DegradationKind kind);
std::string_view to_string(LabelRemap remap);
DegradationKind parse_degradation_kind(std::string_view text);
LabelRemap parse_label_remap(std::string_view text);

/// Strictly increasing maps of [0, 1] onto [0, 1].
double apply_label_remap(LabelRemap remap, double quality);

struct BiasedDatasetConfig {
  std::string name;
  int n_images = 300;
  std::vector<DegradationKind> allowed_kinds;
  LabelRemap label_remap = LabelRemap::identity;
  std::uint64_t seed = 0;
  int image_size = 48;

  void validate() const;
};

struct GroundTruth {
  std::map<std::string, double> qstar;
  std::map<std::string, DegradationKind> kind;
};

struct GeneratedDataset {
  DatasetManifest manifest;
  GroundTruth truth;
  fs::path manifest_path;
  fs::path truth_path;
};

/// Procedural grayscale texture: three sinusoid gratings of random frequency,
/// orientation and phase plus low-amplitude bilinear value noise, min-max
/// normalised onto [0, 1].
ImageRecord gen_base_image(int size, std::uint64_t seed, std::string id = {});

/// gaussian_blur: separable Gaussian, sigma = 4m, taps out to ceil(3 sigma), reflect padding.
/// additive_noise: i.i.d. N(0, (0.3m)^2) drawn from Rng(noise_seed), then clamped to [0, 1].
/// contrast_reduction: v <- 0.5 + (1 - 0.8m)(v - 0.5).
ImageRecord apply_degradation(const ImageRecord& record, const DegradationSpec& spec, std::uint64_t noise_seed = 0);

/// Generates a dataset and writes it under `out_dir`:
///   <name>.csv            id,image_path,mos manifest
///   <name>.truth.csv      id,qstar,kind
///   <name>/<id>.png       16-bit grayscale images
/// The returned manifest holds the same (16-bit quantised) pixels the files do.
/// The labels are label_remap(q*), q* = 1 - magnitude.
GeneratedDataset gen_biased_dataset(const BiasedDatasetConfig& config, const fs::path& out_dir);

GroundTruth load_ground_truth(const fs::path& path);

}  // namespace cdr
