#include <random>

#include "actnet/kernels.hpp"
#include "actnet/reference.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace actnet;
using testutil::max_scaled_error;
using testutil::random_vector;

namespace {

template <typename T>
void check_conv(const kernels::ConvGeometry& g, std::mt19937_64& rng, double tol) {
  const std::size_t xs = static_cast<std::size_t>(g.batch) * g.in_channels * g.height * g.width;
  const std::size_t ys = static_cast<std::size_t>(g.batch) * g.out_channels * g.height * g.width;
  const std::size_t ws = static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel;
  const auto x = random_vector<T>(xs, rng), w = random_vector<T>(ws, rng), b = random_vector<T>(g.out_channels, rng);
  const auto dy = random_vector<T>(ys, rng);

  std::vector<T> y(ys), y_ref(ys);
  kernels::conv2d_forward<T>(g, x, w, b, y);
  reference::conv2d_forward<T>(g, x, w, b, y_ref);
  CHECK(max_scaled_error<T, T>(y, y_ref) < tol);

  std::vector<T> dx(xs), dw(ws, T(0.5)), db(g.out_channels, T(0.25));
  std::vector<T> dx_ref(xs), dw_ref(ws, T(0.5)), db_ref(g.out_channels, T(0.25));
  kernels::conv2d_backward<T>(g, x, w, dy, dx, dw, db);
  reference::conv2d_backward<T>(g, x, w, dy, dx_ref, dw_ref, db_ref);
  CHECK(max_scaled_error<T, T>(dx, dx_ref) < tol);
  CHECK(max_scaled_error<T, T>(dw, dw_ref) < tol);
  CHECK(max_scaled_error<T, T>(db, db_ref) < tol);

  std::vector<T> dw2(ws), db2(g.out_channels), dw2_ref(ws), db2_ref(g.out_channels);
  kernels::conv2d_backward<T>(g, x, w, dy, {}, dw2, db2);
  reference::conv2d_backward<T>(g, x, w, dy, {}, dw2_ref, db2_ref);
  CHECK(max_scaled_error<T, T>(dw2, dw2_ref) < tol);
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("conv2d matches the serial reference on both code paths") {
    std::mt19937_64 rng(11);
    // widths 16/32 take the vectorized direct path, the rest the GEMM path
    const int shapes[][6] = {{2, 3, 5, 8, 8, 3},   {1, 1, 1, 4, 4, 3},   {2, 4, 16, 16, 16, 3}, {1, 9, 3, 32, 32, 3},
                             {2, 8, 8, 7, 5, 3},   {1, 5, 4, 6, 6, 1},   {3, 16, 4, 16, 16, 1}, {1, 2, 17, 16, 48, 3},
                             {2, 12, 10, 8, 16, 3}};
    for (const auto& s : shapes) {
      kernels::ConvGeometry g{s[0], s[1], s[2], s[3], s[4], s[5]};
      CAPTURE(s[1]);
      CAPTURE(s[2]);
      CAPTURE(s[4]);
      check_conv<float>(g, rng, 2e-5);
      check_conv<double>(g, rng, 1e-12);
    }
  }

  TEST_CASE("transposed conv matches the serial reference") {
    std::mt19937_64 rng(12);
    for (auto [n, ci, co, h, w] : std::vector<std::array<int, 5>>{{2, 4, 3, 4, 4}, {1, 8, 4, 8, 16}, {3, 2, 5, 3, 7}}) {
      kernels::UpGeometry g{n, ci, co, h, w};
      const std::size_t xs = static_cast<std::size_t>(n) * ci * h * w, ys = static_cast<std::size_t>(n) * co * 4 * h * w;
      const auto x = random_vector<double>(xs, rng), wt = random_vector<double>(static_cast<std::size_t>(ci) * co * 4, rng);
      const auto b = random_vector<double>(co, rng), dy = random_vector<double>(ys, rng);
      std::vector<double> y(ys), y_ref(ys);
      kernels::upconv2x2_forward<double>(g, x, wt, b, y);
      reference::upconv2x2_forward<double>(g, x, wt, b, y_ref);
      CHECK(max_scaled_error<double, double>(y, y_ref) < 1e-12);
      std::vector<double> dx(xs), dw(wt.size()), db(co), dx_ref(xs), dw_ref(wt.size()), db_ref(co);
      kernels::upconv2x2_backward<double>(g, x, wt, dy, dx, dw, db);
      reference::upconv2x2_backward<double>(g, x, wt, dy, dx_ref, dw_ref, db_ref);
      CHECK(max_scaled_error<double, double>(dx, dx_ref) < 1e-12);
      CHECK(max_scaled_error<double, double>(dw, dw_ref) < 1e-12);
      CHECK(max_scaled_error<double, double>(db, db_ref) < 1e-12);
    }
  }

  TEST_CASE("maxpool forward matches reference and backward routes to the argmax") {
    std::mt19937_64 rng(13);
    kernels::PlaneGeometry g{2, 3, 6, 8};
    const auto x = random_vector<float>(static_cast<std::size_t>(g.size()), rng);
    const std::size_t ys = static_cast<std::size_t>(g.size() / 4);
    std::vector<float> y(ys), y_ref(ys);
    std::vector<std::uint8_t> am(ys), am_ref(ys);
    kernels::maxpool2x2_forward<float>(g, x, y, am);
    reference::maxpool2x2_forward<float>(g, x, y_ref, am_ref);
    CHECK(y == y_ref);
    CHECK(am == am_ref);
    std::vector<float> dy(ys, 1.0f), dx(static_cast<std::size_t>(g.size()), -1.0f);
    kernels::maxpool2x2_backward<float>(g, dy, am, dx);
    double routed = 0;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      CHECK((dx[i] == 0.0f || dx[i] == 1.0f));
      routed += dx[i];
      if (dx[i] == 1.0f) {
        const auto plane = static_cast<std::size_t>(g.plane());
        const auto p = i / plane, r = (i % plane) / 8, c = i % 8;
        CHECK(x[i] == y[p * 12 + (r / 2) * 4 + c / 2]);
      }
    }
    CHECK(routed == doctest::Approx(static_cast<double>(ys)));
  }

  TEST_CASE("batchnorm train forward matches reference; eval forward uses running stats") {
    std::mt19937_64 rng(14);
    kernels::PlaneGeometry g{3, 4, 5, 6};
    const auto n = static_cast<std::size_t>(g.size());
    const auto x = random_vector<double>(n, rng, -2, 3), gamma = random_vector<double>(4, rng), beta = random_vector<double>(4, rng);
    std::vector<double> rm(4, 0.1), rv(4, 0.9), rm_ref(rm), rv_ref(rv);
    std::vector<double> y(n), xh(n), is(4), y_ref(n), xh_ref(n), is_ref(4);
    kernels::batchnorm_forward_train<double>(g, x, gamma, beta, 1e-5, 0.1, rm, rv, y, xh, is);
    reference::batchnorm_forward_train<double>(g, x, gamma, beta, 1e-5, 0.1, rm_ref, rv_ref, y_ref, xh_ref, is_ref);
    CHECK(max_scaled_error<double, double>(y, y_ref) < 1e-12);
    CHECK(max_scaled_error<double, double>(xh, xh_ref) < 1e-12);
    CHECK(max_scaled_error<double, double>(rm, rm_ref) < 1e-12);
    CHECK(max_scaled_error<double, double>(rv, rv_ref) < 1e-12);

    std::vector<double> ye(n);
    kernels::batchnorm_forward_eval<double>(g, x, gamma, beta, rm, rv, 1e-5, ye);
    for (int c = 0; c < 4; ++c) {
      const auto i = static_cast<std::size_t>(c * g.plane() + 7);
      CHECK(ye[i] == doctest::Approx(gamma[c] * (x[i] - rm[c]) / std::sqrt(rv[c] + 1e-5) + beta[c]).epsilon(1e-12));
    }
  }

  TEST_CASE("batchnorm backward matches finite differences of a weighted output sum") {
    std::mt19937_64 rng(15);
    kernels::PlaneGeometry g{2, 3, 3, 4};
    const auto n = static_cast<std::size_t>(g.size());
    auto x = random_vector<double>(n, rng, -1, 2);
    const auto gamma = random_vector<double>(3, rng), beta = random_vector<double>(3, rng), wsum = random_vector<double>(n, rng);
    auto objective = [&](const std::vector<double>& in) {
      std::vector<double> rm(3), rv(3, 1), y(n), xh(n), is(3);
      kernels::batchnorm_forward_train<double>(g, in, gamma, beta, 1e-5, 0.1, rm, rv, y, xh, is);
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += wsum[i] * y[i];
      return s;
    };
    std::vector<double> rm(3), rv(3, 1), y(n), xh(n), is(3), dx(n), dg(3), db(3);
    kernels::batchnorm_forward_train<double>(g, x, gamma, beta, 1e-5, 0.1, rm, rv, y, xh, is);
    kernels::batchnorm_backward<double>(g, wsum, xh, gamma, is, dx, dg, db);
    for (std::size_t i = 0; i < n; i += 5) {
      auto xp = x, xm = x;
      xp[i] += 1e-6;
      xm[i] -= 1e-6;
      CHECK(dx[i] == doctest::Approx((objective(xp) - objective(xm)) / 2e-6).epsilon(1e-6));
    }
  }

  TEST_CASE("relu and channel concat/split") {
    std::vector<float> v{-1, 0, 2, -3, 4};
    kernels::relu_forward<float>(v);
    CHECK(v == std::vector<float>{0, 0, 2, 0, 4});
    std::vector<float> dy{1, 1, 1, 1, 1};
    kernels::relu_backward<float>(v, dy);
    CHECK(dy == std::vector<float>{0, 0, 1, 0, 1});

    std::vector<float> a{1, 2, 3, 4}, b{5, 6}, y(6), a2(4), b2(2);
    kernels::concat_channels<float>(2, 2, 1, 1, a, b, y);
    CHECK(y == std::vector<float>{1, 2, 5, 3, 4, 6});
    kernels::split_channels<float>(2, 2, 1, 1, y, a2, b2);
    CHECK(a2 == a);
    CHECK(b2 == b);
  }
}
