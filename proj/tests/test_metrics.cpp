#include <random>

#include "actnet/metrics.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace actnet;

namespace {

LabelTensor random_mask(std::mt19937_64& rng, int h, int w, int classes) {
  LabelTensor m({h, w});
  for (auto& v : m.storage()) v = static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(classes));
  return m;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("dsc examples") {
    LabelTensor a({4, 4}), b({4, 4});
    for (int i = 0; i < 4; ++i) a[static_cast<std::size_t>(i)] = 1;
    CHECK(dsc(a, a, 1) == 1.0);
    for (int i = 4; i < 8; ++i) b[static_cast<std::size_t>(i)] = 1;
    CHECK(dsc(a, b, 1) == 0.0);
    LabelTensor ab = a;
    for (int i = 4; i < 8; ++i) ab[static_cast<std::size_t>(i)] = 1;
    CHECK(dsc(a, ab, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(dsc(a, a, 3) == 1.0);  // empty in both
    CHECK_THROWS_AS(dsc(a, LabelTensor({4, 5}), 1), ShapeError);
  }

  TEST_CASE("dsc properties on random masks") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
      const auto p = random_mask(rng, 5, 6, 3), g = random_mask(rng, 5, 6, 3);
      for (int c = 0; c < 3; ++c) {
        const double d = dsc(p, g, c);
        CHECK(d == dsc(g, p, c));
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
        CHECK(dsc(g, g, c) == 1.0);
      }
    }
  }

  TEST_CASE("evaluate_masks: ground truth scores 1, background predictor 0, exclusion rule") {
    std::mt19937_64 rng(3);
    std::vector<LabelTensor> gts;
    for (int i = 0; i < 6; ++i) gts.push_back(random_mask(rng, 8, 8, 4));
    const auto perfect = evaluate_masks(gts, gts, 4);
    CHECK(perfect.class_names == std::vector<std::string>{"RV", "MYO", "LV"});
    for (double d : perfect.per_class_dsc) CHECK(d == 1.0);
    CHECK(perfect.mean_dsc == 1.0);
    CHECK(perfect.sample_count == 6);

    const std::vector<LabelTensor> bg(6, LabelTensor({8, 8}));
    const auto zero = evaluate_masks(bg, gts, 4);
    for (double d : zero.per_class_dsc) CHECK(d == 0.0);

    // class 2 absent from slice 1's ground truth: that slice must not count
    LabelTensor g0({2, 2}, std::vector<std::uint8_t>{0, 2, 1, 1}), g1({2, 2}, std::vector<std::uint8_t>{0, 0, 1, 1});
    LabelTensor p0 = g0, p1({2, 2}, std::vector<std::uint8_t>{2, 0, 1, 1});
    const auto r = evaluate_masks({p0, p1}, {g0, g1}, 3, {"a", "b"});
    CHECK(r.per_class_dsc[1] == 1.0);
    CHECK(r.mean_dsc == doctest::Approx((r.per_class_dsc[0] + r.per_class_dsc[1]) / 2).epsilon(1e-15));
    CHECK_THROWS_AS(evaluate_masks({}, {}, 4), DataError);
  }

  TEST_CASE("argmax and report output") {
    Tensor logits({1, 3, 1, 2}, std::vector<float>{0, 5, 1, 0, 2, 1});
    CHECK(argmax_classes(logits).storage() == std::vector<std::uint8_t>{2, 0});
    EvalReport r;
    r.class_names = {"RV", "MYO", "LV"};
    r.per_class_dsc = {0.5, 0.25, 1.0};
    r.mean_dsc = 1.75 / 3;
    r.sample_count = 3;
    r.config_digest = "abc";
    const auto j = nlohmann::json::parse(report_json(r));
    CHECK(j["per_class_dsc"]["MYO"] == 0.25);
    CHECK(j["sample_count"] == 3);
    CHECK(j["config_digest"] == "abc");
    const std::string table = format_report_table(r, "U-Net[3,8]");
    CHECK(table.find("Mean") != std::string::npos);
    CHECK(table.find("0.5833") != std::string::npos);
  }

  TEST_CASE("evaluate runs the model in inference mode") {
    UNet m({2, 2}, 0);
    std::vector<SliceSample> split(3);
    for (auto& s : split) {
      s.image = Tensor({1, 8, 8}, 0.3f);
      s.mask = LabelTensor({8, 8}, 1);
    }
    const auto r1 = evaluate(m, split), r2 = evaluate(m, split);
    CHECK(r1.mean_dsc == r2.mean_dsc);
    CHECK_THROWS_AS(evaluate(m, {}), DataError);
    split[1].mask.reset();
    CHECK_THROWS_AS(evaluate(m, split), DataError);
  }
}
