#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdr/dataset.hpp"
#include "cdr/kernels.hpp"

namespace cdr {

struct ConvBlock {
  int out_channels = 8;
  int kernel = 3;
  int stride = 2;
  bool operator==(const ConvBlock&) const = default;
};

enum class Activation { relu };

/// conv blocks (conv + ReLU) -> global average pool -> FC(hidden) + ReLU -> FC(1).
struct ScorerConfig {
  int patch_size = 32;
  int channels_in = 1;
  std::vector<ConvBlock> conv_blocks{{8, 3, 2}, {16, 3, 2}, {32, 3, 2}};
  int hidden = 64;
  Activation activation = Activation::relu;

  void validate() const;
  /// Channels of the last conv block, i.e. the pooled feature width.
  int feature_width() const { return conv_blocks.back().out_channels; }
  std::vector<kernels::ConvShape> conv_shapes() const;
  bool operator==(const ScorerConfig&) const = default;
};

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::vector<int> shape;
  std::size_t size = 0;
};

/// Where each tensor lives in the flat parameter vector. Order:
/// conv{i}.weight (out, in, k, k), conv{i}.bias, fc1.weight (P, hidden),
/// fc1.bias, fc2.weight (hidden, 1), fc2.bias.
struct Layout {
  std::vector<TensorSlot> slots;
  std::size_t total = 0;

  static Layout for_config(const ScorerConfig& config);
  const TensorSlot& slot(const std::string& name) const;
};

struct ScorerParams {
  ScorerConfig config;
  Layout layout;
  std::vector<double> values;

  std::span<const double> tensor(const TensorSlot& slot) const {
    return std::span(values).subspan(slot.offset, slot.size);
  }
};

/// Activations cached by forward() for one patch.
struct ForwardTrace {
  std::size_t param_count = 0;
  std::vector<double> input;
  std::vector<std::vector<double>> conv_pre;   // per block, before ReLU
  std::vector<std::vector<double>> conv_post;  // per block, after ReLU
  std::vector<double> pooled;                  // GAP output, length P
  std::vector<double> hidden_pre;
  std::vector<double> hidden_post;
  double score = 0.0;
};

struct ForwardResult {
  double score = 0.0;
  ForwardTrace trace;
};

/// He-normal weights (variance 2 / fan_in) and zero biases.
ScorerParams init_params(const ScorerConfig& config, std::uint64_t seed);

ForwardResult forward(const ScorerParams& params, const Patch& patch);
/// Score only; skips retaining the trace.
double score_patch(const ScorerParams& params, const Patch& patch);

/// Gradient of upstream * score with respect to every parameter, in layout order.
std::vector<double> backward(const ForwardTrace& trace, const ScorerParams& params, double upstream);
/// Same, accumulating into `grad` (which must have the layout's length).
void backward_into(const ForwardTrace& trace, const ScorerParams& params, double upstream, std::span<double> grad);

/// Mean score over `n_patches` random unflipped crops.
double predict_image(const ScorerParams& params, const ImageRecord& record, int n_patches, int size, Rng& rng);

/// Throws DataError if `params` was not built for `expected`.
void check_layout(const ScorerParams& params, const ScorerConfig& expected);

/// Model file: "CDRSCORE" magic, u32 version, serialized config, u64 count,
/// little-endian f64 parameters, trailing CRC-32 of everything before it.
std::vector<std::uint8_t> serialize_params(const ScorerParams& params);
ScorerParams deserialize_params(std::span<const std::uint8_t> bytes);
void save_params(const ScorerParams& params, const fs::path& path);
ScorerParams load_params(const fs::path& path);

}  // namespace cdr
