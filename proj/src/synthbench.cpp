#include "cdr/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cdr/error.hpp"

namespace cdr {

namespace {

constexpr double kBlurSigmaPerMagnitude = 4.0;
constexpr double kNoiseStdPerMagnitude = 0.3;
constexpr double kContrastShrinkPerMagnitude = 0.8;

// Mirror index without edge repetition, periodic for any offset.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

double quantize16(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0; }

std::string image_id(const std::string& name, int index, int n) {
  const int width = std::max(4, static_cast<int>(std::to_string(std::max(n - 1, 0)).size()));
  std::string digits = std::to_string(index);
  return name + "_" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(digits.size()))), '0') +
         digits;
}

}  // namespace

std::string_view to_string(DegradationKind kind) {
  switch (kind) {
    case DegradationKind::gaussian_blur: return "gaussian_blur";
    case DegradationKind::additive_noise: return "additive_noise";
    case DegradationKind::contrast_reduction: return "contrast_reduction";
  }
  return "?";
}

std::string_view to_string(LabelRemap remap) {
  switch (remap) {
    case LabelRemap::identity: return "identity";
    case LabelRemap::sqrt: return "sqrt";
    case LabelRemap::square: return "square";
    case LabelRemap::logistic_steep: return "logistic_steep";
  }
  return "?";
}

DegradationKind parse_degradation_kind(std::string_view text) {
  for (auto k : {DegradationKind::gaussian_blur, DegradationKind::additive_noise, DegradationKind::contrast_reduction}) {
    if (to_string(k) == text) return k;
  }
  throw DataError("unknown degradation kind '" + std::string(text) + "'");
}

LabelRemap parse_label_remap(std::string_view text) {
  for (auto r : {LabelRemap::identity, LabelRemap::sqrt, LabelRemap::square, LabelRemap::logistic_steep}) {
    if (to_string(r) == text) return r;
  }
  throw DataError("unknown label remap '" + std::string(text) + "'");
}

double apply_label_remap(LabelRemap remap, double q) {
  switch (remap) {
    case LabelRemap::identity: return q;
    case LabelRemap::sqrt: return std::sqrt(q);
    case LabelRemap::square: return q * q;
    case LabelRemap::logistic_steep: {
      auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
      const double lo = sig(-5.0);
      const double hi = sig(5.0);
      return (sig(10.0 * (q - 0.5)) - lo) / (hi - lo);
    }
  }
  return q;
}

void BiasedDatasetConfig::validate() const {
  if (name.empty()) throw DataError("dataset config needs a name");
  if (n_images < 2) throw DataError("dataset " + name + " needs at least 2 images");
  if (allowed_kinds.empty()) throw DataError("dataset " + name + " has no allowed degradation kinds");
  if (image_size < 8) throw DataError("dataset " + name + ": image size must be at least 8");
}

ImageRecord gen_base_image(int size, std::uint64_t seed, std::string id) {
  if (size < 8) throw DataError("base image size must be at least 8");
  Rng rng(seed);
  struct Grating {
    double fx, fy, phase, amplitude;
  };
  Grating gratings[3];
  for (auto& g : gratings) {
    // Cycles per pixel, spread from coarse structure to fine detail.
    const double freq = 0.02 + 0.23 * rng.uniform();
    const double angle = std::numbers::pi * rng.uniform();
    g = {freq * std::cos(angle), freq * std::sin(angle), 2.0 * std::numbers::pi * rng.uniform(),
         0.5 + 0.5 * rng.uniform()};
  }
  constexpr int kCell = 4;
  constexpr double kNoiseAmplitude = 0.15;
  const int lattice = size / kCell + 2;
  std::vector<double> values(static_cast<std::size_t>(lattice) * lattice);
  for (auto& v : values) v = rng.uniform() - 0.5;

  ImageRecord img;
  img.id = std::move(id);
  img.width = size;
  img.height = size;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (const auto& g : gratings) v += g.amplitude * std::sin(2.0 * std::numbers::pi * (g.fx * x + g.fy * y) + g.phase);
      const double gx = static_cast<double>(x) / kCell;
      const double gy = static_cast<double>(y) / kCell;
      const int ix = static_cast<int>(gx);
      const int iy = static_cast<int>(gy);
      const double tx = gx - ix;
      const double ty = gy - iy;
      auto lat = [&](int a, int b) { return values[static_cast<std::size_t>(b) * lattice + a]; };
      const double top = lat(ix, iy) + tx * (lat(ix + 1, iy) - lat(ix, iy));
      const double bottom = lat(ix, iy + 1) + tx * (lat(ix + 1, iy + 1) - lat(ix, iy + 1));
      v += kNoiseAmplitude * 3.0 * (top + ty * (bottom - top));
      img.pixels[static_cast<std::size_t>(y) * size + x] = v;
    }
  }
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const double min_v = *lo;
  const double range = *hi - *lo;
  for (auto& v : img.pixels) v = range > 0.0 ? std::clamp((v - min_v) / range, 0.0, 1.0) : 0.5;
  return img;
}

ImageRecord apply_degradation(const ImageRecord& record, const DegradationSpec& spec, std::uint64_t noise_seed) {
  if (!(spec.magnitude >= 0.0 && spec.magnitude <= 1.0)) throw DataError("degradation magnitude must lie in [0, 1]");
  ImageRecord out = record;
  const double m = spec.magnitude;
  if (m == 0.0) return out;
  switch (spec.kind) {
    case DegradationKind::gaussian_blur: {
      const double sigma = kBlurSigmaPerMagnitude * m;
      const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
      std::vector<double> kernel(2 * radius + 1);
      double total = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
        total += kernel[k + radius];
      }
      for (auto& w : kernel) w /= total;
      const int w = record.width;
      const int h = record.height;
      std::vector<double> tmp(static_cast<std::size_t>(w) * h);
      for (int c = 0; c < record.channels; ++c) {
        const double* src = record.pixels.data() + static_cast<std::size_t>(c) * w * h;
        double* dst = out.pixels.data() + static_cast<std::size_t>(c) * w * h;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * src[y * w + reflect(x + k, w)];
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
          }
        }
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp[reflect(y + k, h) * w + x];
            dst[static_cast<std::size_t>(y) * w + x] = std::clamp(acc, 0.0, 1.0);
          }
        }
      }
      break;
    }
    case DegradationKind::additive_noise: {
      Rng rng(noise_seed);
      const double std_dev = kNoiseStdPerMagnitude * m;
      for (auto& v : out.pixels) v = std::clamp(v + std_dev * rng.normal(), 0.0, 1.0);
      break;
    }
    case DegradationKind::contrast_reduction: {
      const double factor = 1.0 - kContrastShrinkPerMagnitude * m;
      for (auto& v : out.pixels) v = 0.5 + factor * (v - 0.5);
      break;
    }
  }
  return out;
}

GeneratedDataset gen_biased_dataset(const BiasedDatasetConfig& config, const fs::path& out_dir) {
  config.validate();
  const int n = config.n_images;
  std::vector<ImageRecord> images(n);
  std::vector<double> qstar(n);
  std::vector<DegradationSpec> specs(n);
  Rng rng(derive_seed(config.seed, "degradations"));
  for (int i = 0; i < n; ++i) {
    specs[i].magnitude = rng.uniform();
    specs[i].kind = config.allowed_kinds[rng.below(config.allowed_kinds.size())];
    qstar[i] = 1.0 - specs[i].magnitude;
  }

  const fs::path image_dir = out_dir / config.name;
  fs::create_directories(image_dir);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const std::string id = image_id(config.name, i, n);
    ImageRecord base = gen_base_image(config.image_size, derive_seed(config.seed, "base", i), id);
    ImageRecord img = apply_degradation(base, specs[i], derive_seed(config.seed, "noise", i));
    for (auto& v : img.pixels) v = quantize16(v);
    write_png(image_dir / (id + ".png"), Raster{img.width, img.height, img.channels, img.pixels}, 16);
    images[i] = std::move(img);
  }

  GeneratedDataset result;
  result.manifest.name = config.name;
  std::ostringstream csv;
  std::ostringstream truth;
  csv << "id,image_path,mos\n";
  truth << "id,qstar,kind\n";
  for (int i = 0; i < n; ++i) {
    const std::string& id = images[i].id;
    const double label = apply_label_remap(config.label_remap, qstar[i]);
    csv << id << ',' << config.name << '/' << id << ".png," << format_double(label) << '\n';
    truth << id << ',' << format_double(qstar[i]) << ',' << to_string(specs[i].kind) << '\n';
    result.manifest.labels[id] = label;
    result.truth.qstar[id] = qstar[i];
    result.truth.kind[id] = specs[i].kind;
    result.manifest.records.push_back(std::make_shared<const ImageRecord>(std::move(images[i])));
  }
  result.manifest_path = out_dir / (config.name + ".csv");
  result.truth_path = out_dir / (config.name + ".truth.csv");
  write_text(result.manifest_path, csv.str());
  write_text(result.truth_path, truth.str());
  return result;
}

GroundTruth load_ground_truth(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != std::vector<std::string>{"id", "qstar", "kind"}) {
    throw DataError("ground-truth header must be id,qstar,kind: " + path.string());
  }
  GroundTruth truth;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 3) throw DataError("malformed ground-truth row in " + path.string());
    truth.qstar[fields[0]] = parse_double(fields[1], "qstar");
    truth.kind[fields[0]] = parse_degradation_kind(fields[2]);
  }
  return truth;
}

}  // namespace cdr
