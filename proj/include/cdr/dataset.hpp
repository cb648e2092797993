#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cdr/io.hpp"
#include "cdr/rng.hpp"

namespace cdr {

/// One decoded image. Pixels are planar (c, y, x), row-major per channel,
/// every value in [0, 1].
struct ImageRecord {
  std::string id;
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> pixels;

  double at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

using RecordPtr = std::shared_ptr<const ImageRecord>;

struct DatasetManifest {
  std::string name;
  std::vector<RecordPtr> records;
  std::map<std::string, double> labels;    // raw MOS
  std::map<std::string, double> rescaled;  // empty until rescale_mos

  const ImageRecord& record(const std::string& id) const;
  std::vector<std::string> ids() const;
};

struct Split {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::uint64_t seed = 0;
  double fraction = 0.8;
};

/// Square crop, planar (c, y, x).
struct Patch {
  int size = 0;
  int channels = 0;
  std::vector<double> pixels;
  std::string source_id;
  bool flipped = false;
};

/// Reads a `id,image_path,mos` CSV. Image paths are resolved relative to the
/// CSV's directory. The manifest name is the file stem.
DatasetManifest load_manifest(const fs::path& path);

/// Per-dataset min-max rescaling of the raw labels onto [0, 1].
DatasetManifest rescale_mos(DatasetManifest manifest);

/// Uniform random partition. Ids are sorted lexicographically, shuffled with
/// Fisher-Yates from Rng(seed), and the first round(fraction * N) go to train.
Split split_dataset(const DatasetManifest& manifest, std::uint64_t seed, double fraction = 0.8);

/// n random crops. Per patch the generator is consumed as: left = below(W-size+1),
/// top = below(H-size+1), then one coin() for the mirror only when allow_flip.
std::vector<Patch> sample_patches(const ImageRecord& record, int n, int size, bool allow_flip, Rng& rng);

Patch crop_patch(const ImageRecord& record, int left, int top, int size, bool flip);

/// Bilinear resize (half-pixel centres, edge clamped) so the short side equals
/// `short_side`, then a central crop. Odd margins put the extra row/column at
/// the bottom/right.
Patch resize_short_side_and_center_crop(const ImageRecord& record, int short_side, int crop);

ImageRecord resize_bilinear(const ImageRecord& record, int width, int height);

}  // namespace cdr
