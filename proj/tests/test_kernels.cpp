#include <doctest.h>
#include <omp.h>

#include <vector>

#include "cdr/kernels.hpp"
#include "cdr/rng.hpp"

using namespace cdr;
using kernels::ConvShape;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// Pads explicitly, then convolves: a different route to the same numbers.
std::vector<double> padded_conv(const ConvShape& s, const std::vector<double>& in, const std::vector<double>& w,
                                const std::vector<double>& b) {
  const int p = s.pad();
  const int n = s.in_size + 2 * p;
  std::vector<double> padded(static_cast<std::size_t>(s.in_channels) * n * n);
  for (int c = 0; c < s.in_channels; ++c) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const int sy = kernels::reflect_index(y - p, s.in_size);
        const int sx = kernels::reflect_index(x - p, s.in_size);
        padded[(c * n + y) * n + x] = in[(c * s.in_size + sy) * s.in_size + sx];
      }
    }
  }
  const int o = s.out_size();
  const int k = s.kernel;
  std::vector<double> out(s.out_len());
  for (int oc = 0; oc < s.out_channels; ++oc) {
    for (int y = 0; y < o; ++y) {
      for (int x = 0; x < o; ++x) {
        double acc = 0.0;
        for (int ic = 0; ic < s.in_channels; ++ic) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              acc += w[((oc * s.in_channels + ic) * k + ky) * k + kx] *
                     padded[(ic * n + y * s.stride + ky) * n + x * s.stride + kx];
            }
          }
        }
        out[(oc * o + y) * o + x] = acc + b[oc];
      }
    }
  }
  return out;
}

const ConvShape kShapes[] = {
    {1, 32, 8, 3, 2}, {8, 16, 16, 3, 2}, {16, 8, 32, 3, 2}, {3, 9, 4, 5, 1}, {2, 7, 3, 3, 3}, {24, 40, 24, 3, 1},
};

}  // namespace

TEST_CASE("reflect_index mirrors without repeating the edge") {
  CHECK(kernels::reflect_index(-1, 5) == 1);
  CHECK(kernels::reflect_index(-2, 5) == 2);
  CHECK(kernels::reflect_index(5, 5) == 3);
  CHECK(kernels::reflect_index(6, 5) == 2);
  CHECK(kernels::reflect_index(3, 5) == 3);
  CHECK(kernels::reflect_index(-3, 1) == 0);
}

TEST_CASE("output geometry") {
  CHECK(ConvShape{1, 32, 8, 3, 2}.out_size() == 16);
  CHECK(ConvShape{1, 16, 8, 3, 2}.out_size() == 8);
  CHECK(ConvShape{1, 7, 8, 3, 1}.out_size() == 7);
  CHECK(ConvShape{1, 7, 8, 3, 2}.out_size() == 4);
}

TEST_CASE("reference forward matches an explicitly padded convolution") {
  for (const auto& s : kShapes) {
    const auto in = random_vec(s.in_len(), 1);
    const auto w = random_vec(s.weight_len(), 2);
    const auto b = random_vec(s.out_channels, 3);
    std::vector<double> out(s.out_len());
    kernels::reference::conv_forward(s, in, w, b, out);
    const auto expect = padded_conv(s, in, w, b);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("reference backward is the adjoint of forward") {
  // <conv(x), g> is linear in x and w, so its gradients must match the dot-product identities.
  for (const auto& s : kShapes) {
    const auto in = random_vec(s.in_len(), 4);
    const auto w = random_vec(s.weight_len(), 5);
    const std::vector<double> zero_bias(s.out_channels, 0.0);
    const auto g = random_vec(s.out_len(), 6);
    std::vector<double> gin(s.in_len()), gw(s.weight_len()), gb(s.out_channels);
    kernels::reference::conv_backward(s, in, w, g, gin, gw, gb);

    std::vector<double> out(s.out_len());
    kernels::reference::conv_forward(s, in, w, zero_bias, out);
    double lhs = 0.0, via_in = 0.0, via_w = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) lhs += out[i] * g[i];
    for (std::size_t i = 0; i < in.size(); ++i) via_in += gin[i] * in[i];
    for (std::size_t i = 0; i < w.size(); ++i) via_w += gw[i] * w[i];
    CHECK(via_in == doctest::Approx(lhs).epsilon(1e-10));
    CHECK(via_w == doctest::Approx(lhs).epsilon(1e-10));

    const int o = s.out_size();
    for (int oc = 0; oc < s.out_channels; ++oc) {
      double sum = 0.0;
      for (int i = 0; i < o * o; ++i) sum += g[oc * o * o + i];
      CHECK(gb[oc] == doctest::Approx(sum).epsilon(1e-12));
    }
  }
}

TEST_CASE("parallel kernels are bit-identical to the reference at any thread count") {
  const int saved = omp_get_max_threads();
  for (const auto& s : kShapes) {
    const auto in = random_vec(s.in_len(), 7);
    const auto w = random_vec(s.weight_len(), 8);
    const auto b = random_vec(s.out_channels, 9);
    const auto g = random_vec(s.out_len(), 10);

    std::vector<double> ref_out(s.out_len()), ref_gin(s.in_len()), ref_gw(s.weight_len()), ref_gb(s.out_channels);
    kernels::reference::conv_forward(s, in, w, b, ref_out);
    kernels::reference::conv_backward(s, in, w, g, ref_gin, ref_gw, ref_gb);

    for (int threads : {1, 2, 3, 8}) {
      omp_set_num_threads(threads);
      std::vector<double> out(s.out_len()), gin(s.in_len(), 99.0), gw(s.weight_len(), 99.0), gb(s.out_channels, 99.0);
      kernels::conv_forward(s, in, w, b, out);
      kernels::conv_backward(s, in, w, g, gin, gw, gb);
      CHECK(out == ref_out);
      CHECK(gin == ref_gin);
      CHECK(gw == ref_gw);
      CHECK(gb == ref_gb);

      // Without an input gradient the weight gradients are unchanged.
      std::vector<double> gw2(s.weight_len()), gb2(s.out_channels);
      kernels::conv_backward(s, in, w, g, {}, gw2, gb2);
      CHECK(gw2 == ref_gw);
      CHECK(gb2 == ref_gb);
    }
  }
  omp_set_num_threads(saved);
}
