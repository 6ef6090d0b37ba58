#include "actnet/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace actnet::kernels {

namespace {

// Upper bound on the im2col scratch buffer, in elements. Batches whose
// column matrix would exceed it are processed in image chunks.
constexpr std::int64_t kColumnBudget = std::int64_t{1} << 25;

template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buffers[3];
  return buffers[slot];
}

template <typename T>
T* reserve(int slot, std::int64_t n) {
  auto& b = scratch<T>(slot);
  if (static_cast<std::int64_t>(b.size()) < n) b.resize(static_cast<std::size_t>(n));
  return b.data();
}

int chunk_images(int batch, std::int64_t per_image) {
  const std::int64_t c = std::max<std::int64_t>(1, kColumnBudget / std::max<std::int64_t>(1, per_image));
  return static_cast<int>(std::min<std::int64_t>(batch, c));
}

// col[(c*k + ky)*k + kx][j*hw + p] for images [first, first + count).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, int first, int count, T* col) {
  const int k = g.kernel, pad = g.kernel / 2, h = g.height, w = g.width;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const std::int64_t ld = hw * count;
  const int rows = g.in_channels * count;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int c = r / count, j = r % count;
    const T* plane = x + (static_cast<std::int64_t>(first + j) * g.in_channels + c) * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * ld + j * hw;
        for (int oy = 0; oy < h; ++oy) {
          const int iy = oy + ky - pad;
          T* row = dst + static_cast<std::int64_t>(oy) * w;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::int64_t>(iy) * w;
          const int lo = std::max(0, pad - kx);
          const int hi = std::min(w, w + pad - kx);
          for (int ox = 0; ox < lo; ++ox) row[ox] = T{0};
          for (int ox = lo; ox < hi; ++ox) row[ox] = src[ox + kx - pad];
          for (int ox = hi; ox < w; ++ox) row[ox] = T{0};
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, int first, int count, T* dx) {
  const int k = g.kernel, pad = g.kernel / 2, h = g.height, w = g.width;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const std::int64_t ld = hw * count;
  const int rows = g.in_channels * count;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int c = r / count, j = r % count;
    T* plane = dx + (static_cast<std::int64_t>(first + j) * g.in_channels + c) * hw;
    std::fill(plane, plane + hw, T{0});
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * ld + j * hw;
        for (int oy = 0; oy < h; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* row = plane + static_cast<std::int64_t>(iy) * w;
          const T* s = src + static_cast<std::int64_t>(oy) * w;
          const int lo = std::max(0, pad - kx);
          const int hi = std::min(w, w + pad - kx);
          for (int ox = lo; ox < hi; ++ox) row[ox + kx - pad] += s[ox];
        }
      }
    }
  }
}

// Moves [batch, C, plane] <-> [C, count * plane] for a chunk of images.
template <typename T>
void gather_channels(const T* src, int channels, std::int64_t plane, int first, int count, T* dst) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c)
    for (int j = 0; j < count; ++j)
      std::copy_n(src + (static_cast<std::int64_t>(first + j) * channels + c) * plane, plane,
                  dst + (static_cast<std::int64_t>(c) * count + j) * plane);
}

template <typename T>
void scatter_channels(const T* src, int channels, std::int64_t plane, int first, int count,
                      std::span<const T> bias, T* dst) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const T b = bias.empty() ? T{0} : bias[static_cast<std::size_t>(c)];
    for (int j = 0; j < count; ++j) {
      const T* s = src + (static_cast<std::int64_t>(c) * count + j) * plane;
      T* d = dst + (static_cast<std::int64_t>(first + j) * channels + c) * plane;
      for (std::int64_t p = 0; p < plane; ++p) d[p] = s[p] + b;
    }
  }
}

// Reductions over eight double lanes: independent partial sums let the
// loop vectorize without reassociation flags, and double lanes keep the
// accuracy of a double accumulator.
using Lanes8 = double __attribute__((vector_size(64)));

template <typename T>
Lanes8 load8(const T* s) {
  typedef T V __attribute__((vector_size(8 * sizeof(T))));
  V v;
  __builtin_memcpy(&v, s, sizeof(V));
  return __builtin_convertvector(v, Lanes8);
}

inline double horizontal(Lanes8 v) {
  double t = 0;
  for (int l = 0; l < 8; ++l) t += v[l];
  return t;
}

template <typename T>
double lane_sum(const T* s, std::int64_t n) {
  Lanes8 acc{};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) acc += load8(s + i);
  double total = horizontal(acc);
  for (; i < n; ++i) total += static_cast<double>(s[i]);
  return total;
}

// Sum of (s[i] - mean)^2.
template <typename T>
double lane_sq_dev(const T* s, std::int64_t n, double mean) {
  Lanes8 acc{};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const Lanes8 d = load8(s + i) - mean;
    acc += d * d;
  }
  double total = horizontal(acc);
  for (; i < n; ++i) {
    const double d = static_cast<double>(s[i]) - mean;
    total += d * d;
  }
  return total;
}

template <typename T>
double lane_dot(const T* a, const T* b, std::int64_t n) {
  Lanes8 acc{};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) acc += load8(a + i) * load8(b + i);
  double total = horizontal(acc);
  for (; i < n; ++i) total += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return total;
}

template <typename T>
void accumulate_bias_grad(const T* dy, int batch, int channels, std::int64_t plane, std::span<T> dbias) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    double acc = 0;
    for (int n = 0; n < batch; ++n) acc += lane_sum(dy + (static_cast<std::int64_t>(n) * channels + c) * plane, plane);
    dbias[static_cast<std::size_t>(c)] += static_cast<T>(acc);
  }
}

// 64-byte SIMD lanes via GCC/Clang vector extensions.
template <typename T>
struct Simd;
template <>
struct Simd<float> {
  typedef float type __attribute__((vector_size(64)));
  static constexpr int lanes = 16;
};
template <>
struct Simd<double> {
  typedef double type __attribute__((vector_size(64)));
  static constexpr int lanes = 8;
};

template <typename T>
bool use_direct(const ConvGeometry& g) {
  return g.kernel == 3 && g.width % Simd<T>::lanes == 0;
}

// Copies [planes, h, w] into zero-bordered [planes, h + 2, w + 2].
template <typename T>
T* pad_planes(const T* x, int planes, int h, int w, int slot) {
  const std::int64_t hp = h + 2, wp = w + 2;
  T* out = reserve<T>(slot, planes * hp * wp);
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    T* dst = out + p * hp * wp;
    std::fill(dst, dst + wp, T{0});
    std::fill(dst + (hp - 1) * wp, dst + hp * wp, T{0});
    for (int r = 0; r < h; ++r) {
      T* row = dst + (r + 1) * wp;
      row[0] = T{0};
      std::copy_n(x + (static_cast<std::int64_t>(p) * h + r) * w, w, row + 1);
      row[w + 1] = T{0};
    }
  }
  return out;
}

// 3x3 "same" convolution over pre-padded input, 8 output channels per pass
// held in vector registers. weight: [out, in, 3, 3].
template <typename T>
void direct_conv3x3(int batch, int in_c, int out_c, int h, int w, const T* xp, const T* weight, const T* bias,
                     T* y) {
  using V = typename Simd<T>::type;
  constexpr int lanes = Simd<T>::lanes;
  constexpr int block = 8;
  const std::int64_t wp = w + 2, plane_p = (h + 2) * wp;
  const int oblocks = (out_c + block - 1) / block;
  const int tasks = batch * oblocks;
#pragma omp parallel for schedule(static)
  for (int task = 0; task < tasks; ++task) {
    const int n = task / oblocks, o0 = (task % oblocks) * block;
    const int ob = std::min(block, out_c - o0);
    for (int oy = 0; oy < h; ++oy)
      for (int ox = 0; ox < w; ox += lanes) {
        V acc[block];
        for (int j = 0; j < block; ++j) acc[j] = V{} + (j < ob && bias ? bias[o0 + j] : T{0});
        for (int c = 0; c < in_c; ++c) {
          const T* xc = xp + (static_cast<std::int64_t>(n) * in_c + c) * plane_p + static_cast<std::int64_t>(oy) * wp + ox;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              V xv;
              __builtin_memcpy(&xv, xc + ky * wp + kx, sizeof(V));
              for (int j = 0; j < block; ++j) {
                const T wv = j < ob ? weight[((static_cast<std::int64_t>(o0 + j) * in_c + c) * 3 + ky) * 3 + kx] : T{0};
                acc[j] += wv * xv;
              }
            }
        }
        for (int j = 0; j < ob; ++j)
          __builtin_memcpy(y + ((static_cast<std::int64_t>(n) * out_c + o0 + j) * h + oy) * w + ox, &acc[j], sizeof(V));
      }
  }
}

// dweight[o, c, ky, kx] += sum over (n, y, x) of dy[n, o, y, x] * xp[n, c, y + ky, x + kx].
// Images form the outer loop so one image's planes stay cache-resident
// across all (output block, input channel) tasks; per-task vector partial
// sums persist in scratch between images.
template <typename T>
void direct_conv3x3_weight_grad(int batch, int in_c, int out_c, int h, int w, const T* xp, const T* dy, T* dweight) {
  using V = typename Simd<T>::type;
  constexpr int lanes = Simd<T>::lanes;
  constexpr int block = 2;
  const std::int64_t wp = w + 2, plane_p = (h + 2) * wp, plane = static_cast<std::int64_t>(h) * w;
  const int oblocks = (out_c + block - 1) / block;
  const int tasks = oblocks * in_c;
  std::vector<V> partial(static_cast<std::size_t>(tasks) * block * 9, V{});
#pragma omp parallel
  for (int n = 0; n < batch; ++n) {
#pragma omp for schedule(static)
    for (int task = 0; task < tasks; ++task) {
      const int o0 = (task / in_c) * block, c = task % in_c;
      const int ob = std::min(block, out_c - o0);
      V* acc = partial.data() + static_cast<std::size_t>(task) * block * 9;
      V a[block][9];
      for (int j = 0; j < block; ++j)
        for (int t = 0; t < 9; ++t) a[j][t] = acc[j * 9 + t];
      const T* xc = xp + (static_cast<std::int64_t>(n) * in_c + c) * plane_p;
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ox += lanes) {
          V d[block];
          for (int j = 0; j < block; ++j) {
            if (j < ob)
              __builtin_memcpy(&d[j], dy + (static_cast<std::int64_t>(n) * out_c + o0 + j) * plane + oy * w + ox, sizeof(V));
            else
              d[j] = V{};
          }
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              V xv;
              __builtin_memcpy(&xv, xc + (oy + ky) * wp + ox + kx, sizeof(V));
              for (int j = 0; j < block; ++j) a[j][ky * 3 + kx] += d[j] * xv;
            }
        }
      for (int j = 0; j < block; ++j)
        for (int t = 0; t < 9; ++t) acc[j * 9 + t] = a[j][t];
    }
  }
  for (int task = 0; task < tasks; ++task) {
    const int o0 = (task / in_c) * block, c = task % in_c;
    const int ob = std::min(block, out_c - o0);
    for (int j = 0; j < ob; ++j)
      for (int t = 0; t < 9; ++t) {
        const V& v = partial[(static_cast<std::size_t>(task) * block + j) * 9 + t];
        T s{0};
        for (int l = 0; l < lanes; ++l) s += v[l];
        dweight[(static_cast<std::int64_t>(o0 + j) * in_c + c) * 9 + t] += s;
      }
  }
}

}  // namespace

template <>
void gemm<float>(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                  const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  if (use_direct<T>(g)) {
    const T* xp = pad_planes(x.data(), g.batch * g.in_channels, g.height, g.width, 0);
    direct_conv3x3(g.batch, g.in_channels, g.out_channels, g.height, g.width, xp, weight.data(),
                   bias.empty() ? nullptr : bias.data(), y.data());
    return;
  }
  const std::int64_t hw = static_cast<std::int64_t>(g.height) * g.width;
  const int kk = g.in_channels * g.kernel * g.kernel;
  const int chunk = chunk_images(g.batch, kk * hw);
  for (int first = 0; first < g.batch; first += chunk) {
    const int count = std::min(chunk, g.batch - first);
    const std::int64_t cols = hw * count;
    T* col = reserve<T>(0, kk * cols);
    T* out = reserve<T>(1, g.out_channels * cols);
    im2col(g, x.data(), first, count, col);
    gemm<T>(false, false, g.out_channels, static_cast<int>(cols), kk, T{1}, weight.data(), kk, col,
            static_cast<int>(cols), T{0}, out, static_cast<int>(cols));
    scatter_channels(out, g.out_channels, hw, first, count, bias, y.data());
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dweight, std::span<T> dbias) {
  const std::int64_t hw = static_cast<std::int64_t>(g.height) * g.width;
  const int kk = g.in_channels * g.kernel * g.kernel;
  const int chunk = chunk_images(g.batch, kk * hw);
  accumulate_bias_grad(dy.data(), g.batch, g.out_channels, hw, dbias);
  if (use_direct<T>(g)) {
    const T* xp = pad_planes(x.data(), g.batch * g.in_channels, g.height, g.width, 0);
    direct_conv3x3_weight_grad(g.batch, g.in_channels, g.out_channels, g.height, g.width, xp, dy.data(),
                               dweight.data());
    if (!dx.empty()) {
      // dx is the correlation of dy with the channel-transposed, spatially
      // flipped kernel.
      const T* dyp = pad_planes(dy.data(), g.batch * g.out_channels, g.height, g.width, 1);
      T* flipped = reserve<T>(2, static_cast<std::int64_t>(kk) * g.out_channels);
      for (int o = 0; o < g.out_channels; ++o)
        for (int c = 0; c < g.in_channels; ++c)
          for (int t = 0; t < 9; ++t)
            flipped[(static_cast<std::int64_t>(c) * g.out_channels + o) * 9 + (8 - t)] =
                weight[(static_cast<std::size_t>(o) * g.in_channels + c) * 9 + t];
      direct_conv3x3(g.batch, g.out_channels, g.in_channels, g.height, g.width, dyp, flipped,
                     static_cast<const T*>(nullptr), dx.data());
    }
    return;
  }
  for (int first = 0; first < g.batch; first += chunk) {
    const int count = std::min(chunk, g.batch - first);
    const std::int64_t cols = hw * count;
    T* col = reserve<T>(0, kk * cols);
    T* dout = reserve<T>(1, g.out_channels * cols);
    im2col(g, x.data(), first, count, col);
    gather_channels(dy.data(), g.out_channels, hw, first, count, dout);
    gemm<T>(false, true, g.out_channels, kk, static_cast<int>(cols), T{1}, dout, static_cast<int>(cols), col,
            static_cast<int>(cols), T{1}, dweight.data(), kk);
    if (!dx.empty()) {
      // col is free again; reuse it for dcol.
      gemm<T>(true, false, kk, static_cast<int>(cols), g.out_channels, T{1}, weight.data(), kk, dout,
              static_cast<int>(cols), T{0}, col, static_cast<int>(cols));
      col2im(g, col, first, count, dx.data());
    }
  }
}

template <typename T>
void upconv2x2_forward(const UpGeometry& g, std::span<const T> x, std::span<const T> weight,
                       std::span<const T> bias, std::span<T> y) {
  const std::int64_t hw = static_cast<std::int64_t>(g.height) * g.width;
  const int rows = g.out_channels * 4;
  const int chunk = chunk_images(g.batch, std::max(g.in_channels, rows) * hw);
  const int ow = g.width * 2;
  const std::int64_t ohw = hw * 4;
  for (int first = 0; first < g.batch; first += chunk) {
    const int count = std::min(chunk, g.batch - first);
    const std::int64_t cols = hw * count;
    T* xin = reserve<T>(0, g.in_channels * cols);
    T* out = reserve<T>(1, rows * cols);
    gather_channels(x.data(), g.in_channels, hw, first, count, xin);
    gemm<T>(true, false, rows, static_cast<int>(cols), g.in_channels, T{1}, weight.data(), rows, xin,
            static_cast<int>(cols), T{0}, out, static_cast<int>(cols));
#pragma omp parallel for schedule(static)
    for (int o = 0; o < g.out_channels; ++o) {
      const T b = bias[static_cast<std::size_t>(o)];
      for (int j = 0; j < count; ++j) {
        T* dst = y.data() + (static_cast<std::int64_t>(first + j) * g.out_channels + o) * ohw;
        for (int a = 0; a < 2; ++a)
          for (int bb = 0; bb < 2; ++bb) {
            const T* src = out + (static_cast<std::int64_t>(o * 4 + a * 2 + bb)) * cols + j * hw;
            for (int i = 0; i < g.height; ++i)
              for (int jj = 0; jj < g.width; ++jj)
                dst[static_cast<std::int64_t>(2 * i + a) * ow + 2 * jj + bb] = src[i * g.width + jj] + b;
          }
      }
    }
  }
}

template <typename T>
void upconv2x2_backward(const UpGeometry& g, std::span<const T> x, std::span<const T> weight,
                        std::span<const T> dy, std::span<T> dx, std::span<T> dweight, std::span<T> dbias) {
  const std::int64_t hw = static_cast<std::int64_t>(g.height) * g.width;
  const int rows = g.out_channels * 4;
  const int chunk = chunk_images(g.batch, std::max(g.in_channels, rows) * hw);
  const int ow = g.width * 2;
  const std::int64_t ohw = hw * 4;
  accumulate_bias_grad(dy.data(), g.batch, g.out_channels, ohw, dbias);
  for (int first = 0; first < g.batch; first += chunk) {
    const int count = std::min(chunk, g.batch - first);
    const std::int64_t cols = hw * count;
    T* xin = reserve<T>(0, g.in_channels * cols);
    T* dout = reserve<T>(1, rows * cols);
    gather_channels(x.data(), g.in_channels, hw, first, count, xin);
#pragma omp parallel for schedule(static)
    for (int o = 0; o < g.out_channels; ++o) {
      for (int j = 0; j < count; ++j) {
        const T* src = dy.data() + (static_cast<std::int64_t>(first + j) * g.out_channels + o) * ohw;
        for (int a = 0; a < 2; ++a)
          for (int bb = 0; bb < 2; ++bb) {
            T* dst = dout + (static_cast<std::int64_t>(o * 4 + a * 2 + bb)) * cols + j * hw;
            for (int i = 0; i < g.height; ++i)
              for (int jj = 0; jj < g.width; ++jj)
                dst[i * g.width + jj] = src[static_cast<std::int64_t>(2 * i + a) * ow + 2 * jj + bb];
          }
      }
    }
    gemm<T>(false, true, g.in_channels, rows, static_cast<int>(cols), T{1}, xin, static_cast<int>(cols), dout,
            static_cast<int>(cols), T{1}, dweight.data(), rows);
    if (!dx.empty()) {
      gemm<T>(false, false, g.in_channels, static_cast<int>(cols), rows, T{1}, weight.data(), rows, dout,
              static_cast<int>(cols), T{0}, xin, static_cast<int>(cols));
      scatter_channels(xin, g.in_channels, hw, first, count, std::span<const T>{}, dx.data());
    }
  }
}

template <typename T>
void maxpool2x2_forward(const PlaneGeometry& g, std::span<const T> x, std::span<T> y,
                        std::span<std::uint8_t> argmax) {
  const int w = g.width, oh = g.height / 2, ow = g.width / 2;
  const std::int64_t plane = g.plane();
  const int planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    for (int i = 0; i < oh; ++i) {
      const T* __restrict r0 = x.data() + p * plane + static_cast<std::int64_t>(2 * i) * w;
      const T* __restrict r1 = r0 + w;
      T* __restrict dst = y.data() + (static_cast<std::int64_t>(p) * oh + i) * ow;
      std::uint8_t* __restrict arg = argmax.data() + (static_cast<std::int64_t>(p) * oh + i) * ow;
      // Branch-free; ties resolve to the first index in scan order.
      for (int j = 0; j < ow; ++j) {
        const T a0 = r0[2 * j], a1 = r0[2 * j + 1], b0 = r1[2 * j], b1 = r1[2 * j + 1];
        const int right_top = a1 > a0, right_bottom = b1 > b0;
        const T top = std::max(a0, a1), bottom = std::max(b0, b1);
        const int lower = bottom > top;
        dst[j] = std::max(top, bottom);
        arg[j] = static_cast<std::uint8_t>(right_top + lower * (2 + right_bottom - right_top));
      }
    }
  }
}

template <typename T>
void maxpool2x2_backward(const PlaneGeometry& g, std::span<const T> dy,
                         std::span<const std::uint8_t> argmax, std::span<T> dx) {
  const int w = g.width, oh = g.height / 2, ow = g.width / 2;
  const std::int64_t plane = g.plane();
  const int planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    for (int i = 0; i < oh; ++i) {
      T* __restrict r0 = dx.data() + p * plane + static_cast<std::int64_t>(2 * i) * w;
      T* __restrict r1 = r0 + w;
      const T* __restrict src = dy.data() + (static_cast<std::int64_t>(p) * oh + i) * ow;
      const std::uint8_t* __restrict arg = argmax.data() + (static_cast<std::int64_t>(p) * oh + i) * ow;
      for (int j = 0; j < ow; ++j) {
        const int a = arg[j];
        const T v = src[j];
        r0[2 * j] = a == 0 ? v : T{0};
        r0[2 * j + 1] = a == 1 ? v : T{0};
        r1[2 * j] = a == 2 ? v : T{0};
        r1[2 * j + 1] = a == 3 ? v : T{0};
      }
    }
  }
}

template <typename T>
void batchnorm_forward_train(const PlaneGeometry& g, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, T eps, T momentum, std::span<T> running_mean,
                             std::span<T> running_var, std::span<T> y, std::span<T> xhat,
                             std::span<T> inv_std) {
  const std::int64_t plane = g.plane();
  const std::int64_t m = plane * g.batch;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.channels; ++c) {
    // Accumulate in double: per-channel sums span the whole batch.
    auto channel_plane = [&](int n) { return x.data() + (static_cast<std::int64_t>(n) * g.channels + c) * plane; };
    double sum = 0;
    for (int n = 0; n < g.batch; ++n) sum += lane_sum(channel_plane(n), plane);
    const double mean = sum / static_cast<double>(m);
    double sq = 0;
    for (int n = 0; n < g.batch; ++n) sq += lane_sq_dev(channel_plane(n), plane, mean);
    const double var = sq / static_cast<double>(m);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[static_cast<std::size_t>(c)] = istd;
    const T gm = gamma[static_cast<std::size_t>(c)], bt = beta[static_cast<std::size_t>(c)];
    const T mu = static_cast<T>(mean);
    for (int n = 0; n < g.batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * g.channels + c) * plane;
      const T* xs = x.data() + off;
      T* hs = xhat.data() + off;
      T* ys = y.data() + off;
      for (std::int64_t p = 0; p < plane; ++p) {
        const T h = (xs[p] - mu) * istd;
        hs[p] = h;
        ys[p] = gm * h + bt;
      }
    }
    const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
    auto& rm = running_mean[static_cast<std::size_t>(c)];
    auto& rv = running_var[static_cast<std::size_t>(c)];
    rm = static_cast<T>((1.0 - momentum) * rm + momentum * mean);
    rv = static_cast<T>((1.0 - momentum) * rv + momentum * unbiased);
  }
}

template <typename T>
void batchnorm_forward_eval(const PlaneGeometry& g, std::span<const T> x, std::span<const T> gamma,
                            std::span<const T> beta, std::span<const T> running_mean,
                            std::span<const T> running_var, T eps, std::span<T> y) {
  const std::int64_t plane = g.plane();
  const int planes = g.batch * g.channels;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const auto c = static_cast<std::size_t>(p % g.channels);
    const T scale = gamma[c] / std::sqrt(running_var[c] + eps);
    const T shift = beta[c] - running_mean[c] * scale;
    const T* s = x.data() + static_cast<std::int64_t>(p) * plane;
    T* d = y.data() + static_cast<std::int64_t>(p) * plane;
    for (std::int64_t i = 0; i < plane; ++i) d[i] = s[i] * scale + shift;
  }
}

template <typename T>
void batchnorm_backward(const PlaneGeometry& g, std::span<const T> dy, std::span<const T> xhat,
                        std::span<const T> gamma, std::span<const T> inv_std, std::span<T> dx,
                        std::span<T> dgamma, std::span<T> dbeta) {
  const std::int64_t plane = g.plane();
  const double m = static_cast<double>(plane * g.batch);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.channels; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int n = 0; n < g.batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * g.channels + c) * plane;
      sum_dy += lane_sum(dy.data() + off, plane);
      sum_dy_xhat += lane_dot(dy.data() + off, xhat.data() + off, plane);
    }
    dgamma[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
    dbeta[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
    const T k = gamma[static_cast<std::size_t>(c)] * inv_std[static_cast<std::size_t>(c)];
    const T mean_dy = static_cast<T>(sum_dy / m);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / m);
    for (int n = 0; n < g.batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * g.channels + c) * plane;
      const T* d = dy.data() + off;
      const T* h = xhat.data() + off;
      T* out = dx.data() + off;
      for (std::int64_t p = 0; p < plane; ++p) out[p] = k * (d[p] - mean_dy - h[p] * mean_dy_xhat);
    }
  }
}

template <typename T>
void relu_forward(std::span<T> x) {
  const auto n = static_cast<std::int64_t>(x.size());
  T* d = x.data();
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) d[i] = d[i] > T{0} ? d[i] : T{0};
}

template <typename T>
void relu_backward(std::span<const T> y, std::span<T> dy) {
  const auto n = static_cast<std::int64_t>(y.size());
  const T* o = y.data();
  T* d = dy.data();
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) d[i] = o[i] > T{0} ? d[i] : T{0};
}

template <typename T>
void concat_channels(int batch, int channels_a, int channels_b, std::int64_t plane, std::span<const T> a,
                     std::span<const T> b, std::span<T> y) {
  const std::int64_t sa = channels_a * plane, sb = channels_b * plane;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    std::copy_n(a.data() + n * sa, sa, y.data() + n * (sa + sb));
    std::copy_n(b.data() + n * sb, sb, y.data() + n * (sa + sb) + sa);
  }
}

template <typename T>
void split_channels(int batch, int channels_a, int channels_b, std::int64_t plane, std::span<const T> y,
                    std::span<T> a, std::span<T> b) {
  const std::int64_t sa = channels_a * plane, sb = channels_b * plane;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < batch; ++n) {
    if (!a.empty()) std::copy_n(y.data() + n * (sa + sb), sa, a.data() + n * sa);
    if (!b.empty()) std::copy_n(y.data() + n * (sa + sb) + sa, sb, b.data() + n * sb);
  }
}

#define ACTNET_INSTANTIATE(T)                                                                                 \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,               \
                                  std::span<const T>, std::span<T>);                                          \
  template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,              \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>);             \
  template void upconv2x2_forward<T>(const UpGeometry&, std::span<const T>, std::span<const T>,              \
                                     std::span<const T>, std::span<T>);                                       \
  template void upconv2x2_backward<T>(const UpGeometry&, std::span<const T>, std::span<const T>,             \
                                      std::span<const T>, std::span<T>, std::span<T>, std::span<T>);          \
  template void maxpool2x2_forward<T>(const PlaneGeometry&, std::span<const T>, std::span<T>,                \
                                      std::span<std::uint8_t>);                                               \
  template void maxpool2x2_backward<T>(const PlaneGeometry&, std::span<const T>,                             \
                                       std::span<const std::uint8_t>, std::span<T>);                          \
  template void batchnorm_forward_train<T>(const PlaneGeometry&, std::span<const T>, std::span<const T>,     \
                                           std::span<const T>, T, T, std::span<T>, std::span<T>,              \
                                           std::span<T>, std::span<T>, std::span<T>);                         \
  template void batchnorm_forward_eval<T>(const PlaneGeometry&, std::span<const T>, std::span<const T>,      \
                                          std::span<const T>, std::span<const T>, std::span<const T>, T,      \
                                          std::span<T>);                                                      \
  template void batchnorm_backward<T>(const PlaneGeometry&, std::span<const T>, std::span<const T>,          \
                                      std::span<const T>, std::span<const T>, std::span<T>, std::span<T>,     \
                                      std::span<T>);                                                          \
  template void relu_forward<T>(std::span<T>);                                                                \
  template void relu_backward<T>(std::span<const T>, std::span<T>);                                           \
  template void concat_channels<T>(int, int, int, std::int64_t, std::span<const T>, std::span<const T>,      \
                                   std::span<T>);                                                             \
  template void split_channels<T>(int, int, int, std::int64_t, std::span<const T>, std::span<T>, std::span<T>);

ACTNET_INSTANTIATE(float)
ACTNET_INSTANTIATE(double)

#undef ACTNET_INSTANTIATE

}  // namespace actnet::kernels
