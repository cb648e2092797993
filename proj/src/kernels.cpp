#include "cdr/kernels.hpp"

#include <algorithm>
#include <vector>

namespace cdr::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

// Source row/column for every (output position, kernel offset).
std::vector<int> tap_table(const ConvShape& s) {
  const int n = s.out_size();
  std::vector<int> table(static_cast<std::size_t>(n) * s.kernel);
  for (int o = 0; o < n; ++o) {
    for (int k = 0; k < s.kernel; ++k) table[o * s.kernel + k] = reflect_index(o * s.stride + k - s.pad(), s.in_size);
  }
  return table;
}

}  // namespace

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

void conv_forward(const ConvShape& s, std::span<const double> input, std::span<const double> weights,
                  std::span<const double> bias, std::span<double> output) {
  const int out_n = s.out_size();
  const int k = s.kernel;
  const std::size_t in_plane = static_cast<std::size_t>(s.in_size) * s.in_size;
  const std::size_t out_plane = static_cast<std::size_t>(out_n) * out_n;
  const std::vector<int> taps = tap_table(s);
  const std::size_t work = s.out_len() * s.in_channels * k * k;

#pragma omp parallel for schedule(static) if (work >= kParallelWork)
  for (int oc = 0; oc < s.out_channels; ++oc) {
    double* out = output.data() + oc * out_plane;
    std::fill(out, out + out_plane, bias[oc]);
    for (int ic = 0; ic < s.in_channels; ++ic) {
      const double* in = input.data() + ic * in_plane;
      const double* w = weights.data() + (static_cast<std::size_t>(oc) * s.in_channels + ic) * k * k;
      for (int oy = 0; oy < out_n; ++oy) {
        double* out_row = out + static_cast<std::size_t>(oy) * out_n;
        for (int ky = 0; ky < k; ++ky) {
          const double* in_row = in + static_cast<std::size_t>(taps[oy * k + ky]) * s.in_size;
          for (int kx = 0; kx < k; ++kx) {
            const double wv = w[ky * k + kx];
            for (int ox = 0; ox < out_n; ++ox) out_row[ox] += wv * in_row[taps[ox * k + kx]];
          }
        }
      }
    }
  }
}

void conv_backward(const ConvShape& s, std::span<const double> input, std::span<const double> weights,
                   std::span<const double> grad_output, std::span<double> grad_input,
                   std::span<double> grad_weights, std::span<double> grad_bias) {
  const int out_n = s.out_size();
  const int k = s.kernel;
  const std::size_t in_plane = static_cast<std::size_t>(s.in_size) * s.in_size;
  const std::size_t out_plane = static_cast<std::size_t>(out_n) * out_n;
  const std::vector<int> taps = tap_table(s);
  const std::size_t work = s.out_len() * s.in_channels * k * k;

#pragma omp parallel for schedule(static) if (work >= kParallelWork)
  for (int oc = 0; oc < s.out_channels; ++oc) {
    const double* go = grad_output.data() + oc * out_plane;
    double db = 0.0;
    for (std::size_t i = 0; i < out_plane; ++i) db += go[i];
    grad_bias[oc] = db;
    for (int ic = 0; ic < s.in_channels; ++ic) {
      const double* in = input.data() + ic * in_plane;
      double* gw = grad_weights.data() + (static_cast<std::size_t>(oc) * s.in_channels + ic) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double acc = 0.0;
          for (int oy = 0; oy < out_n; ++oy) {
            const double* in_row = in + static_cast<std::size_t>(taps[oy * k + ky]) * s.in_size;
            const double* go_row = go + static_cast<std::size_t>(oy) * out_n;
            for (int ox = 0; ox < out_n; ++ox) acc += go_row[ox] * in_row[taps[ox * k + kx]];
          }
          gw[ky * k + kx] = acc;
        }
      }
    }
  }

  if (grad_input.empty()) return;
#pragma omp parallel for schedule(static) if (work >= kParallelWork)
  for (int ic = 0; ic < s.in_channels; ++ic) {
    double* gi = grad_input.data() + ic * in_plane;
    std::fill(gi, gi + in_plane, 0.0);
    for (int oc = 0; oc < s.out_channels; ++oc) {
      const double* go = grad_output.data() + oc * out_plane;
      const double* w = weights.data() + (static_cast<std::size_t>(oc) * s.in_channels + ic) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w[ky * k + kx];
          for (int oy = 0; oy < out_n; ++oy) {
            double* gi_row = gi + static_cast<std::size_t>(taps[oy * k + ky]) * s.in_size;
            const double* go_row = go + static_cast<std::size_t>(oy) * out_n;
            for (int ox = 0; ox < out_n; ++ox) gi_row[taps[ox * k + kx]] += wv * go_row[ox];
          }
        }
      }
    }
  }
}

namespace reference {

void conv_forward(const ConvShape& s, std::span<const double> input, std::span<const double> weights,
                  std::span<const double> bias, std::span<double> output) {
  const int out_n = s.out_size();
  const int n = s.in_size;
  const int k = s.kernel;
  for (int oc = 0; oc < s.out_channels; ++oc) {
    for (int oy = 0; oy < out_n; ++oy) {
      for (int ox = 0; ox < out_n; ++ox) {
        double acc = bias[oc];
        for (int ic = 0; ic < s.in_channels; ++ic) {
          for (int ky = 0; ky < k; ++ky) {
            const int y = reflect_index(oy * s.stride + ky - s.pad(), n);
            for (int kx = 0; kx < k; ++kx) {
              const int x = reflect_index(ox * s.stride + kx - s.pad(), n);
              acc += weights[((oc * s.in_channels + ic) * k + ky) * k + kx] * input[(ic * n + y) * n + x];
            }
          }
        }
        output[(oc * out_n + oy) * out_n + ox] = acc;
      }
    }
  }
}

void conv_backward(const ConvShape& s, std::span<const double> input, std::span<const double> weights,
                   std::span<const double> grad_output, std::span<double> grad_input,
                   std::span<double> grad_weights, std::span<double> grad_bias) {
  const int out_n = s.out_size();
  const int n = s.in_size;
  const int k = s.kernel;
  for (int oc = 0; oc < s.out_channels; ++oc) {
    double db = 0.0;
    for (int i = 0; i < out_n * out_n; ++i) db += grad_output[oc * out_n * out_n + i];
    grad_bias[oc] = db;
    for (int ic = 0; ic < s.in_channels; ++ic) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double acc = 0.0;
          for (int oy = 0; oy < out_n; ++oy) {
            const int y = reflect_index(oy * s.stride + ky - s.pad(), n);
            for (int ox = 0; ox < out_n; ++ox) {
              const int x = reflect_index(ox * s.stride + kx - s.pad(), n);
              acc += grad_output[(oc * out_n + oy) * out_n + ox] * input[(ic * n + y) * n + x];
            }
          }
          grad_weights[((oc * s.in_channels + ic) * k + ky) * k + kx] = acc;
        }
      }
    }
  }
  if (grad_input.empty()) return;
  std::fill(grad_input.begin(), grad_input.end(), 0.0);
  for (int ic = 0; ic < s.in_channels; ++ic) {
    for (int oc = 0; oc < s.out_channels; ++oc) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double w = weights[((oc * s.in_channels + ic) * k + ky) * k + kx];
          for (int oy = 0; oy < out_n; ++oy) {
            const int y = reflect_index(oy * s.stride + ky - s.pad(), n);
            for (int ox = 0; ox < out_n; ++ox) {
              const int x = reflect_index(ox * s.stride + kx - s.pad(), n);
              grad_input[(ic * n + y) * n + x] += w * grad_output[(oc * out_n + oy) * out_n + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace cdr::kernels
