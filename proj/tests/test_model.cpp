#include <random>

#include "actnet/model.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace actnet;

namespace {

// Layer-by-layer shape enumeration, independent of the builder.
std::int64_t enumerate_parameters(int L, int n1, int in_ch, int classes) {
  struct Layer {
    std::int64_t weight, bias;
  };
  std::vector<Layer> layers;
  auto conv = [&](std::int64_t ci, std::int64_t co, std::int64_t k) { layers.push_back({co * ci * k * k, co}); };
  auto norm = [&](std::int64_t c) { layers.push_back({c, c}); };
  std::vector<std::int64_t> ch;
  for (int i = 0; i < L; ++i) ch.push_back(static_cast<std::int64_t>(n1) << i);
  std::int64_t prev = in_ch;
  for (int i = 0; i < L; ++i) {
    conv(prev, ch[i], 3);
    norm(ch[i]);
    conv(ch[i], ch[i], 3);
    norm(ch[i]);
    prev = ch[i];
  }
  for (int i = L - 2; i >= 0; --i) {
    layers.push_back({ch[i + 1] * ch[i] * 4, ch[i]});
    conv(2 * ch[i], ch[i], 3);
    norm(ch[i]);
    conv(ch[i], ch[i], 3);
    norm(ch[i]);
  }
  conv(ch[0], classes, 1);
  std::int64_t total = 0;
  for (const auto& l : layers) total += l.weight + l.bias;
  return total;
}

std::int64_t enumerated_count(const UNet& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += static_cast<std::int64_t>(p.value.size());
  return n;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("channel schedule") {
    CHECK(channel_schedule({4, 16}) == std::vector<std::int64_t>{16, 32, 64, 128});
    CHECK(channel_schedule({6, 64}) == std::vector<std::int64_t>{64, 128, 256, 512, 1024, 2048});
    CHECK(channel_schedule({2, 1}) == std::vector<std::int64_t>{1, 2});
    CHECK_THROWS_AS(channel_schedule({1, 16}), InvalidSpecError);
    CHECK_THROWS_AS(channel_schedule({4, 0}), InvalidSpecError);
    CHECK(parse_spec("5,32").num_encoder_layers == 5);
    CHECK_THROWS_AS(parse_spec("5"), InvalidSpecError);
    CHECK_THROWS_AS(parse_spec("a,b"), InvalidSpecError);
    CHECK(to_string(ModelSpec{4, 16}) == "U-Net[4,16]");
  }

  TEST_CASE("parameter count: builder, analytic formula and enumeration oracle agree") {
    std::mt19937_64 rng(3);
    const int Ls[] = {2, 3, 4}, Ns[] = {1, 2, 4, 8};
    for (int trial = 0; trial < 20; ++trial) {
      const ModelSpec spec{Ls[rng() % 3], Ns[rng() % 4], 1, 4, 64};
      CAPTURE(to_string(spec));
      const UNet a(spec, rng()), b(spec, rng());
      const auto oracle = enumerate_parameters(spec.num_encoder_layers, spec.initial_channels, 1, 4);
      CHECK(enumerated_count(a) == oracle);
      CHECK(enumerated_count(b) == oracle);
      CHECK(a.parameter_count() == oracle);
      CHECK(analytic_parameter_count(spec) == oracle);
    }
    for (auto [L, n] : {std::pair{4, 16}, {5, 32}, {6, 64}})
      CHECK(analytic_parameter_count({L, n}) == enumerate_parameters(L, n, 1, 4));
  }

  TEST_CASE("complexity report") {
    const auto r = complexity({4, 16});
    CHECK(r.model_size_bytes == 4 * r.param_count);
    CHECK(r.flops == r.conv_flops + r.norm_flops + r.activation_flops);
    CHECK(r.param_count > 0);
    CHECK(r.flops > 0);
    CHECK(conv2d_flops(1, 1, 3, 4, 4) == 288);
    ModelSpec s{4, 16, 1, 4, 256}, half{4, 16, 1, 4, 128};
    CHECK(complexity(s).conv_flops == 4 * complexity(half).conv_flops);
    std::int64_t prev = 0;
    for (int side : {8, 16, 32, 64, 128}) {
      const auto f = estimate_flops({4, 16, 1, 4, side});
      CHECK(f >= prev);
      prev = f;
    }
    CHECK_THROWS_AS(complexity({4, 16, 1, 4, 100}), InvalidSpecError);
    const double g = complexity({5, 32, 1, 4, 256}).flops / 1e9;
    CHECK(g > 23.56 / 2);
    CHECK(g < 23.56 * 2);
  }

  TEST_CASE("construction is deterministic per seed and parameter order is stable") {
    const UNet a({3, 4}, 42), b({3, 4}, 42), c({3, 4}, 43);
    CHECK(parameter_checksum(a) == parameter_checksum(b));
    CHECK(parameter_checksum(a) != parameter_checksum(c));
    REQUIRE(a.parameters().size() == c.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i].name == c.parameters()[i].name);
    CHECK(a.parameters().front().name == "enc1.conv1.weight");
    CHECK(a.parameters().back().name == "head.bias");
  }

  TEST_CASE("forward preserves spatial dims and rejects indivisible inputs") {
    UNet m({4, 16}, 0);
    const Tensor zeros({2, 1, 64, 64});
    for (Phase ph : {Phase::Eval, Phase::Train}) {
      const Tensor y = m.forward(zeros, ph);
      CHECK(y.shape() == Shape{2, 4, 64, 64});
      CHECK(std::all_of(y.storage().begin(), y.storage().end(), [](float v) { return std::isfinite(v); }));
    }
    m.backward(Tensor({2, 4, 64, 64}));
    CHECK(m.forward(Tensor({1, 1, 24, 40}), Phase::Eval).shape() == Shape{1, 4, 24, 40});
    CHECK_THROWS_AS(m.forward(Tensor({1, 1, 60, 64}), Phase::Eval), ShapeError);
    CHECK_THROWS_AS(m.forward(Tensor({1, 2, 64, 64}), Phase::Eval), ShapeError);
    CHECK_THROWS_AS(m.backward(Tensor({2, 4, 64, 64})), Error);
  }

  TEST_CASE("backward matches finite differences through the whole network") {
    std::mt19937_64 rng(9);
    for (const ModelSpec spec : {ModelSpec{2, 2, 1, 3, 8}, ModelSpec{3, 2, 1, 4, 8}}) {
      CAPTURE(to_string(spec));
      UNetD m(spec, 5);
      // Perturb BN affine terms and biases so no gradient is trivially zero.
      for (auto& p : m.parameters())
        for (auto& v : p.value.storage()) v += 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
      const TensorD x = testutil::random_tensor<double>({2, 1, 8, 8}, rng);
      const TensorD w = testutil::random_tensor<double>({2, spec.num_classes, 8, 8}, rng);
      auto objective = [&]() {
        const TensorD y = m.forward(x, Phase::Train);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
        m.backward(TensorD(y.shape()));  // discard the cache
        return s;
      };
      m.zero_grad();
      m.forward(x, Phase::Train);
      m.backward(w);
      for (auto& p : m.parameters()) {
        const std::size_t stride = std::max<std::size_t>(1, p.value.size() / 3);
        for (std::size_t i = 0; i < p.value.size(); i += stride) {
          const double orig = p.value[i];
          const double analytic = p.grad[i];
          p.value[i] = orig + 1e-6;
          const double fp = objective();
          p.value[i] = orig - 1e-6;
          const double fm = objective();
          p.value[i] = orig;
          const double numeric = (fp - fm) / 2e-6;
          CAPTURE(p.name);
          CAPTURE(i);
          CHECK(std::abs(analytic - numeric) <= 1e-5 * std::max(1.0, std::abs(numeric)));
        }
      }
    }
  }

  TEST_CASE("eval forward uses running statistics and is batch-independent") {
    std::mt19937_64 rng(4);
    UNet m({3, 4}, 1);
    const Tensor x = testutil::random_tensor<float>({3, 1, 16, 16}, rng, 0, 1);
    for (int i = 0; i < 3; ++i) {
      m.forward(x, Phase::Train);
      m.backward(Tensor({3, 4, 16, 16}));
    }
    const Tensor all = m.forward(x, Phase::Eval);
    const Tensor one = m.forward(slice_batch(x, 1, 1), Phase::Eval);
    CHECK(testutil::max_scaled_error<float, float>(one.span(), slice_batch(all, 1, 1).span()) < 1e-5);
  }
}
