#pragma once

// Serial direct-loop versions of the kernels in kernels.hpp. No BLAS, no
// im2col, no OpenMP: each output is computed from its definition. Used as the
// oracle in kernel tests and as the baseline in the benchmark.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>

#include "actnet/kernels.hpp"

namespace actnet::reference {

using kernels::ConvGeometry;
using kernels::PlaneGeometry;
using kernels::UpGeometry;

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  const int k = g.kernel, pad = k / 2, h = g.height, w = g.width;
  for (int n = 0; n < g.batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox) {
          T acc = bias.empty() ? T{0} : bias[o];
          for (int c = 0; c < g.in_channels; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy + ky - pad, ix = ox + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += weight[((o * g.in_channels + c) * k + ky) * k + kx] *
                       x[((static_cast<std::size_t>(n) * g.in_channels + c) * h + iy) * w + ix];
              }
          y[((static_cast<std::size_t>(n) * g.out_channels + o) * h + oy) * w + ox] = acc;
        }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight, std::span<T> dbias) {
  const int k = g.kernel, pad = k / 2, h = g.height, w = g.width;
  std::fill(dx.begin(), dx.end(), T{0});
  for (int n = 0; n < g.batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox) {
          const T d = dy[((static_cast<std::size_t>(n) * g.out_channels + o) * h + oy) * w + ox];
          dbias[o] += d;
          for (int c = 0; c < g.in_channels; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy + ky - pad, ix = ox + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                const auto xi = ((static_cast<std::size_t>(n) * g.in_channels + c) * h + iy) * w + ix;
                const auto wi = static_cast<std::size_t>(((o * g.in_channels + c) * k + ky) * k + kx);
                dweight[wi] += d * x[xi];
                if (!dx.empty()) dx[xi] += d * weight[wi];
              }
        }
}

template <typename T>
void upconv2x2_forward(const UpGeometry& g, std::span<const T> x, std::span<const T> weight,
                       std::span<const T> bias, std::span<T> y) {
  const int oh = g.height * 2, ow = g.width * 2;
  for (int n = 0; n < g.batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const int iy = oy / 2, ix = ox / 2, a = oy % 2, b = ox % 2;
          T acc = bias[o];
          for (int c = 0; c < g.in_channels; ++c)
            acc += x[((static_cast<std::size_t>(n) * g.in_channels + c) * g.height + iy) * g.width + ix] *
                   weight[((c * g.out_channels + o) * 2 + a) * 2 + b];
          y[((static_cast<std::size_t>(n) * g.out_channels + o) * oh + oy) * ow + ox] = acc;
        }
}

template <typename T>
void upconv2x2_backward(const UpGeometry& g, std::span<const T> x, std::span<const T> weight,
                        std::span<const T> dy, std::span<T> dx, std::span<T> dweight, std::span<T> dbias) {
  const int oh = g.height * 2, ow = g.width * 2;
  std::fill(dx.begin(), dx.end(), T{0});
  for (int n = 0; n < g.batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const int iy = oy / 2, ix = ox / 2, a = oy % 2, b = ox % 2;
          const T d = dy[((static_cast<std::size_t>(n) * g.out_channels + o) * oh + oy) * ow + ox];
          dbias[o] += d;
          for (int c = 0; c < g.in_channels; ++c) {
            const auto xi = ((static_cast<std::size_t>(n) * g.in_channels + c) * g.height + iy) * g.width + ix;
            const auto wi = static_cast<std::size_t>(((c * g.out_channels + o) * 2 + a) * 2 + b);
            dweight[wi] += d * x[xi];
            if (!dx.empty()) dx[xi] += d * weight[wi];
          }
        }
}

template <typename T>
void maxpool2x2_forward(const PlaneGeometry& g, std::span<const T> x, std::span<T> y,
                        std::span<std::uint8_t> argmax) {
  const int oh = g.height / 2, ow = g.width / 2;
  for (int p = 0; p < g.batch * g.channels; ++p)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T best{};
        std::uint8_t which = 0;
        for (std::uint8_t q = 0; q < 4; ++q) {
          const T v = x[static_cast<std::size_t>(p) * g.plane() + (2 * i + q / 2) * g.width + 2 * j + q % 2];
          if (q == 0 || v > best) best = v, which = q;
        }
        y[static_cast<std::size_t>(p) * oh * ow + i * ow + j] = best;
        argmax[static_cast<std::size_t>(p) * oh * ow + i * ow + j] = which;
      }
}

template <typename T>
void batchnorm_forward_train(const PlaneGeometry& g, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, T eps, T momentum, std::span<T> running_mean,
                             std::span<T> running_var, std::span<T> y, std::span<T> xhat,
                             std::span<T> inv_std) {
  const double m = static_cast<double>(g.plane() * g.batch);
  auto idx = [&](int n, int c, std::int64_t p) {
    return static_cast<std::size_t>((static_cast<std::int64_t>(n) * g.channels + c) * g.plane() + p);
  };
  for (int c = 0; c < g.channels; ++c) {
    double mean = 0, var = 0;
    for (int n = 0; n < g.batch; ++n)
      for (std::int64_t p = 0; p < g.plane(); ++p) mean += x[idx(n, c, p)];
    mean /= m;
    for (int n = 0; n < g.batch; ++n)
      for (std::int64_t p = 0; p < g.plane(); ++p) var += (x[idx(n, c, p)] - mean) * (x[idx(n, c, p)] - mean);
    const double unbiased = m > 1 ? var / (m - 1) : var / m;
    var /= m;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[c] = static_cast<T>(istd);
    for (int n = 0; n < g.batch; ++n)
      for (std::int64_t p = 0; p < g.plane(); ++p) {
        const double h = (x[idx(n, c, p)] - mean) * istd;
        xhat[idx(n, c, p)] = static_cast<T>(h);
        y[idx(n, c, p)] = static_cast<T>(gamma[c] * h + beta[c]);
      }
    running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mean);
    running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
  }
}

}  // namespace actnet::reference
