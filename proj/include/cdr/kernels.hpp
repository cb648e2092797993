#pragma once

#include <span>

namespace cdr::kernels {

/// Square-kernel "same" convolution with reflect padding (pad = kernel / 2)
/// and a uniform stride. Tensors are planar (c, y, x); weights are
/// (out_c, in_c, k, k).
struct ConvShape {
  int in_channels = 0;
  int in_size = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 2;

  int pad() const { return kernel / 2; }
  int out_size() const { return (in_size + 2 * pad() - kernel) / stride + 1; }
  std::size_t in_len() const { return static_cast<std::size_t>(in_channels) * in_size * in_size; }
  std::size_t out_len() const { return static_cast<std::size_t>(out_channels) * out_size() * out_size(); }
  std::size_t weight_len() const { return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel; }
};

/// Mirror index without edge repetition; size-1 axes map everything to 0.
int reflect_index(int i, int n);

// Parallel kernels. Each output element accumulates its terms in the same
// order as the reference, so results match it bit-for-bit at any thread count.
void conv_forward(const ConvShape& shape, std::span<const double> input, std::span<const double> weights,
                  std::span<const double> bias, std::span<double> output);

/// Gradients for one sample. `grad_input` may be empty (first layer).
/// All gradient outputs are overwritten, not accumulated.
void conv_backward(const ConvShape& shape, std::span<const double> input, std::span<const double> weights,
                   std::span<const double> grad_output, std::span<double> grad_input,
                   std::span<double> grad_weights, std::span<double> grad_bias);

/// Straight-line serial versions kept as the test oracle and benchmark baseline.
namespace reference {

void conv_forward(const ConvShape& shape, std::span<const double> input, std::span<const double> weights,
                  std::span<const double> bias, std::span<double> output);

void conv_backward(const ConvShape& shape, std::span<const double> input, std::span<const double> weights,
                   std::span<const double> grad_output, std::span<double> grad_input,
                   std::span<double> grad_weights, std::span<double> grad_bias);

}  // namespace reference

}  // namespace cdr::kernels
