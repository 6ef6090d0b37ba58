#pragma once

// OpenMP-parallel layer kernels. Every routine works on raw NCHW buffers;
// shapes are carried by the small geometry structs below. Serial reference
// versions with the same signatures live in reference.hpp and back the tests.

#include <cstdint>
#include <span>

namespace actnet::kernels {

// Stride-1 convolution with "same" zero padding (pad = kernel / 2).
struct ConvGeometry {
  int batch = 1;
  int in_channels = 1;
  int out_channels = 1;
  int height = 1;
  int width = 1;
  int kernel = 3;
};

// 2x2 stride-2 transposed convolution; height/width are the input dims.
struct UpGeometry {
  int batch = 1;
  int in_channels = 1;
  int out_channels = 1;
  int height = 1;
  int width = 1;
};

struct PlaneGeometry {
  int batch = 1;
  int channels = 1;
  int height = 1;
  int width = 1;
  std::int64_t plane() const { return static_cast<std::int64_t>(height) * width; }
  std::int64_t size() const { return plane() * channels * batch; }
};

// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);

// weight: [out, in, k, k], bias: [out], y: [batch, out, h, w].
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);

// Accumulates into dweight/dbias. dx is overwritten; pass an empty span to skip it.
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight, std::span<T> dbias);

// weight: [in, out, 2, 2], y: [batch, out, 2h, 2w].
template <typename T>
void upconv2x2_forward(const UpGeometry& g, std::span<const T> x, std::span<const T> weight,
                       std::span<const T> bias, std::span<T> y);

template <typename T>
void upconv2x2_backward(const UpGeometry& g, std::span<const T> x, std::span<const T> weight,
                        std::span<const T> dy, std::span<T> dx, std::span<T> dweight, std::span<T> dbias);

// g describes the input; y and argmax are [batch, channels, h/2, w/2].
template <typename T>
void maxpool2x2_forward(const PlaneGeometry& g, std::span<const T> x, std::span<T> y,
                        std::span<std::uint8_t> argmax);

template <typename T>
void maxpool2x2_backward(const PlaneGeometry& g, std::span<const T> dy,
                         std::span<const std::uint8_t> argmax, std::span<T> dx);

// Training-mode batch normalization over (N, H, W) per channel. Writes the
// normalized input to xhat and the per-channel 1/sqrt(var + eps) to inv_std,
// and folds the batch statistics into the running buffers.
template <typename T>
void batchnorm_forward_train(const PlaneGeometry& g, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, T eps, T momentum, std::span<T> running_mean,
                             std::span<T> running_var, std::span<T> y, std::span<T> xhat,
                             std::span<T> inv_std);

template <typename T>
void batchnorm_forward_eval(const PlaneGeometry& g, std::span<const T> x, std::span<const T> gamma,
                            std::span<const T> beta, std::span<const T> running_mean,
                            std::span<const T> running_var, T eps, std::span<T> y);

// Accumulates dgamma/dbeta, overwrites dx.
template <typename T>
void batchnorm_backward(const PlaneGeometry& g, std::span<const T> dy, std::span<const T> xhat,
                        std::span<const T> gamma, std::span<const T> inv_std, std::span<T> dx,
                        std::span<T> dgamma, std::span<T> dbeta);

template <typename T>
void relu_forward(std::span<T> x);

// Zeroes dy wherever the forward output was not positive.
template <typename T>
void relu_backward(std::span<const T> y, std::span<T> dy);

// y[n] = concat(a[n], b[n]) along channels.
template <typename T>
void concat_channels(int batch, int channels_a, int channels_b, std::int64_t plane,
                     std::span<const T> a, std::span<const T> b, std::span<T> y);

template <typename T>
void split_channels(int batch, int channels_a, int channels_b, std::int64_t plane,
                    std::span<const T> y, std::span<T> a, std::span<T> b);

}  // namespace actnet::kernels
