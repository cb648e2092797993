#include "cdr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "cdr/error.hpp"

namespace cdr {

const ImageRecord& DatasetManifest::record(const std::string& id) const {
  for (const auto& r : records) {
    if (r->id == id) return *r;
  }
  throw DataError("unknown image id '" + id + "' in " + name);
}

std::vector<std::string> DatasetManifest::ids() const {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r->id);
  return out;
}

DatasetManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("manifest not found: " + path.string());
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty manifest: " + path.string());
  const auto header = split_csv_line(line);
  if (header != std::vector<std::string>{"id", "image_path", "mos"}) {
    throw DataError("manifest header must be id,image_path,mos: " + path.string());
  }
  DatasetManifest manifest;
  manifest.name = path.stem().string();
  const fs::path base = path.parent_path();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 3) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    }
    const std::string& id = fields[0];
    if (id.empty()) throw DataError(path.string() + ":" + std::to_string(line_no) + ": empty id");
    if (manifest.labels.contains(id)) throw DataError("duplicate id '" + id + "' in " + path.string());
    const double mos = parse_double(fields[2], "mos");
    Raster raster = read_png(base / fields[1]);
    auto record = std::make_shared<ImageRecord>();
    record->id = id;
    record->width = raster.width;
    record->height = raster.height;
    record->channels = raster.channels;
    record->pixels = std::move(raster.pixels);
    manifest.records.push_back(std::move(record));
    manifest.labels[id] = mos;
  }
  if (manifest.records.empty()) throw DataError("empty manifest (no records): " + path.string());
  return manifest;
}

DatasetManifest rescale_mos(DatasetManifest manifest) {
  if (manifest.labels.empty()) throw DataError("cannot rescale an empty manifest");
  const auto [lo, hi] = std::minmax_element(manifest.labels.begin(), manifest.labels.end(),
                                            [](const auto& a, const auto& b) { return a.second < b.second; });
  const double min_raw = lo->second;
  const double max_raw = hi->second;
  if (!(max_raw > min_raw)) throw DataError("degenerate labels in " + manifest.name + ": all values identical");
  const double range = max_raw - min_raw;
  manifest.rescaled.clear();
  for (const auto& [id, raw] : manifest.labels) {
    double v = (raw - min_raw) / range;
    if (raw == max_raw) v = 1.0;
    manifest.rescaled[id] = v;
  }
  return manifest;
}

Split split_dataset(const DatasetManifest& manifest, std::uint64_t seed, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw DataError("split fraction must lie in (0, 1)");
  std::vector<std::string> ids = manifest.ids();
  if (ids.empty()) throw DataError("cannot split an empty manifest");
  std::sort(ids.begin(), ids.end());
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  if (n_train == 0 || n_train >= ids.size()) {
    throw DataError("split of " + std::to_string(ids.size()) + " images leaves one side empty");
  }
  Rng rng(seed);
  rng.shuffle(ids);
  Split split;
  split.seed = seed;
  split.fraction = fraction;
  split.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.test_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return split;
}

Patch crop_patch(const ImageRecord& record, int left, int top, int size, bool flip) {
  Patch patch;
  patch.size = size;
  patch.channels = record.channels;
  patch.source_id = record.id;
  patch.flipped = flip;
  patch.pixels.resize(static_cast<std::size_t>(size) * size * record.channels);
  auto* dst = patch.pixels.data();
  for (int c = 0; c < record.channels; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const int sx = flip ? left + size - 1 - x : left + x;
        *dst++ = record.at(c, top + y, sx);
      }
    }
  }
  return patch;
}

std::vector<Patch> sample_patches(const ImageRecord& record, int n, int size, bool allow_flip, Rng& rng) {
  if (size <= 0 || record.width < size || record.height < size) {
    throw DataError("image " + record.id + " (" + std::to_string(record.width) + "x" + std::to_string(record.height) +
                    ") is smaller than patch size " + std::to_string(size));
  }
  std::vector<Patch> patches;
  patches.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(record.width - size + 1)));
    const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(record.height - size + 1)));
    const bool flip = allow_flip && rng.coin();
    patches.push_back(crop_patch(record, left, top, size, flip));
  }
  return patches;
}

ImageRecord resize_bilinear(const ImageRecord& record, int width, int height) {
  if (width <= 0 || height <= 0) throw DataError("resize target must be positive");
  ImageRecord out;
  out.id = record.id;
  out.width = width;
  out.height = height;
  out.channels = record.channels;
  out.pixels.resize(static_cast<std::size_t>(width) * height * record.channels);

  struct Tap {
    int i0, i1;
    double w1;
  };
  auto taps = [](int in, int outn) {
    std::vector<Tap> t(outn);
    const double scale = static_cast<double>(in) / outn;
    for (int d = 0; d < outn; ++d) {
      double src = (d + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in - 1);
      t[d] = {i0, i1, src - i0};
    }
    return t;
  };
  const auto xs = taps(record.width, width);
  const auto ys = taps(record.height, height);
  double* dst = out.pixels.data();
  for (int c = 0; c < record.channels; ++c) {
    for (int y = 0; y < height; ++y) {
      const Tap& ty = ys[y];
      for (int x = 0; x < width; ++x) {
        const Tap& tx = xs[x];
        const double top = record.at(c, ty.i0, tx.i0) + tx.w1 * (record.at(c, ty.i0, tx.i1) - record.at(c, ty.i0, tx.i0));
        const double bottom =
            record.at(c, ty.i1, tx.i0) + tx.w1 * (record.at(c, ty.i1, tx.i1) - record.at(c, ty.i1, tx.i0));
        *dst++ = top + ty.w1 * (bottom - top);
      }
    }
  }
  return out;
}

Patch resize_short_side_and_center_crop(const ImageRecord& record, int short_side, int crop) {
  if (crop <= 0 || short_side <= 0) throw DataError("crop and short side must be positive");
  if (crop > short_side) throw DataError("crop size exceeds short side");
  int width = short_side;
  int height = short_side;
  if (record.width < record.height) {
    height = static_cast<int>(std::lround(static_cast<double>(record.height) * short_side / record.width));
  } else if (record.height < record.width) {
    width = static_cast<int>(std::lround(static_cast<double>(record.width) * short_side / record.height));
  }
  const ImageRecord resized = (width == record.width && height == record.height)
                                  ? record
                                  : resize_bilinear(record, width, height);
  const int left = (width - crop) / 2;
  const int top = (height - crop) / 2;
  return crop_patch(resized, left, top, crop, false);
}

}  // namespace cdr
