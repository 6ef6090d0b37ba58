#include <fstream>
#include <random>
#include <set>

#include "actnet/data.hpp"
#include "actnet/image_io.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace actnet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_class(const LabelTensor& m, int c) {
  return static_cast<std::size_t>(std::count(m.storage().begin(), m.storage().end(), c));
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("synthetic generation is deterministic and well formed") {
    testutil::TempDir a("synth_a"), b("synth_b");
    generate_synthetic(30, 32, 7, a.path());
    generate_synthetic(30, 32, 7, b.path());
    for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), a.path());
      CAPTURE(rel.string());
      CHECK(slurp(entry.path()) == slurp(b.path() / rel));
    }
    const auto splits = load_dataset(a.path(), 4);
    CHECK(splits.val.size() == 3);
    CHECK(splits.test.size() == 6);
    CHECK(splits.train_labeled.size() == 2);
    CHECK(splits.train_unlabeled.size() == 19);
    double bg_fraction = 0;
    std::size_t n = 0;
    for (const auto* pool : {&splits.train_labeled, &splits.val, &splits.test})
      for (const auto& s : *pool) {
        REQUIRE(s.mask);
        std::set<int> classes(s.mask->storage().begin(), s.mask->storage().end());
        CHECK(classes == std::set<int>{0, 1, 2, 3});
        bg_fraction += static_cast<double>(count_class(*s.mask, 0)) / static_cast<double>(s.mask->size());
        ++n;
      }
    CHECK(bg_fraction / static_cast<double>(n) > 0.5);
    for (const auto& s : splits.train_unlabeled) {
      CHECK_FALSE(s.labeled());
      CHECK(s.image.shape() == Shape{1, 32, 32});
      for (float v : s.image.storage()) CHECK((v >= 0.0f && v <= 1.0f));
    }
    CHECK_THROWS_AS(generate_synthetic(0, 32, 1, a.path()), DataError);
    CHECK_THROWS_AS(generate_synthetic(3, 30, 1, a.path()), DataError);
  }

  TEST_CASE("200-slice split follows 70/10/20 with 10% of train labeled") {
    testutil::TempDir d("synth_200");
    generate_synthetic(200, 16, 3, d.path());
    const auto m = read_manifest(d.path() / "manifest.tsv");
    std::size_t train = 0, val = 0, test = 0, labeled = 0;
    std::set<std::string> ids;
    for (const auto& e : m) {
      ids.insert(e.id);
      train += e.split == Split::Train;
      val += e.split == Split::Val;
      test += e.split == Split::Test;
      labeled += e.split == Split::Train && e.labeled;
    }
    CHECK(ids.size() == 200);
    CHECK(train == 140);
    CHECK(val == 20);
    CHECK(test == 40);
    CHECK(labeled == 14);
  }

  TEST_CASE("loader rejects bad files with the file named") {
    testutil::TempDir d("bad");
    generate_synthetic(10, 16, 1, d.path());
    const auto manifest = read_manifest(d.path() / "manifest.tsv");
    std::string victim;
    for (const auto& e : manifest)
      if (e.split != Split::Train) victim = e.id;
    LabelTensor mask = load_mask(d.path() / "masks" / (victim + ".png"), 4);
    mask[0] = 4;
    save_mask(d.path() / "masks" / (victim + ".png"), mask);
    try {
      load_dataset(d.path(), 4);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(victim + ".png") != std::string::npos);
    }
    CHECK_NOTHROW(load_dataset(d.path(), 5));

    fs::remove(d.path() / "images" / (victim + ".png"));
    try {
      load_dataset(d.path(), 5);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(victim + ".png") != std::string::npos);
    }
  }

  TEST_CASE("manifest parsing and size mismatch") {
    testutil::TempDir d("manifest");
    generate_synthetic(4, 16, 2, d.path());
    {
      std::ofstream out(d.path() / "m2.tsv");
      out << "slice_00000\tbogus\t1\n";
    }
    CHECK_THROWS_AS(read_manifest(d.path() / "m2.tsv"), DataError);
    {
      std::ofstream out(d.path() / "m3.tsv");
      out << "slice_00000\ttrain\t1\nslice_00000\tval\t1\n";
    }
    CHECK_THROWS_AS(read_manifest(d.path() / "m3.tsv"), DataError);
    write_png_gray8(d.path() / "images" / "slice_00001.png", 8, 8, std::vector<std::uint8_t>(64, 3));
    CHECK_THROWS_AS(load_dataset(d.path(), 4), DataError);
  }

  TEST_CASE("an all-labeled manifest yields an empty unlabeled pool") {
    testutil::TempDir d("all_labeled");
    generate_synthetic(10, 16, 2, d.path());
    auto m = read_manifest(d.path() / "manifest.tsv");
    for (auto& e : m) e.labeled = true;
    write_manifest(d.path() / "manifest.tsv", m);
    const auto s = load_dataset(d.path(), 4);
    CHECK(s.train_unlabeled.empty());
    CHECK(s.train_labeled.size() == 7);
  }

  TEST_CASE("mask save/load is lossless; 16-bit images normalize to [0, 1]") {
    testutil::TempDir d("io");
    std::mt19937_64 rng(1);
    LabelTensor m({5, 7});
    for (auto& v : m.storage()) v = static_cast<std::uint8_t>(rng() % 4);
    save_mask(d.path() / "m.png", m);
    CHECK(load_mask(d.path() / "m.png", 4) == m);
    const Tensor t = normalize_slice({100, 300, 1100, 600}, 2, 2);
    CHECK(t.storage() == std::vector<float>{0.0f, 0.2f, 1.0f, 0.5f});
    CHECK(normalize_slice({7, 7, 7, 7}, 2, 2).storage() == std::vector<float>(4, 0.0f));
  }

  TEST_CASE("sampler: exact composition, determinism, independent cycling") {
    SemiBatchSampler s(14, 126, {10, 10, true}, 5), same(14, 126, {10, 10, true}, 5), other(14, 126, {10, 10, true}, 6);
    std::vector<int> labeled_hits(14), unlabeled_hits(126);
    for (int t = 0; t < 126; ++t) {
      const auto a = s.next();
      CHECK(a.labeled.size() == 10);
      CHECK(a.unlabeled.size() == 10);
      const auto b = same.indices_at(t);
      CHECK(a.labeled == b.labeled);
      CHECK(a.unlabeled == b.unlabeled);
      for (auto i : a.labeled) ++labeled_hits[i];
      for (auto i : a.unlabeled) ++unlabeled_hits[i];
    }
    // 1260 draws per pool: every unlabeled index exactly 10 times, labeled 90 times
    CHECK(std::all_of(unlabeled_hits.begin(), unlabeled_hits.end(), [](int h) { return h == 10; }));
    CHECK(std::all_of(labeled_hits.begin(), labeled_hits.end(), [](int h) { return h == 90; }));
    CHECK(s.indices_at(3).labeled != other.indices_at(3).labeled);

    // within one epoch every index appears once
    SemiBatchSampler epoch(20, 0, {5, 0, true}, 1);
    std::set<std::size_t> seen;
    for (int t = 0; t < 4; ++t)
      for (auto i : epoch.indices_at(t).labeled) seen.insert(i);
    CHECK(seen.size() == 20);

    SemiBatchSampler fs(4, 0, {2, 0, true}, 1);
    CHECK(fs.indices_at(0).unlabeled.empty());
    CHECK_THROWS_AS(SemiBatchSampler(4, 0, {2, 1, true}, 1), DataError);
    CHECK_THROWS_AS(SemiBatchSampler(4, 10, {5, 1, false}, 1), DataError);
    CHECK_NOTHROW(SemiBatchSampler(4, 10, {5, 1, true}, 1));
  }

  TEST_CASE("next_batch maps indices onto samples") {
    std::vector<SliceSample> lab(3), unl(4);
    for (int i = 0; i < 3; ++i) lab[static_cast<std::size_t>(i)].id = "l" + std::to_string(i);
    for (int i = 0; i < 4; ++i) unl[static_cast<std::size_t>(i)].id = "u" + std::to_string(i);
    SemiBatchSampler s(3, 4, {2, 2, true}, 0);
    const auto idx = s.indices_at(0);
    const auto batch = next_batch(lab, unl, s);
    REQUIRE(batch.labeled.size() == 2);
    CHECK(batch.labeled[0]->id == "l" + std::to_string(idx.labeled[0]));
    CHECK(batch.unlabeled[1]->id == "u" + std::to_string(idx.unlabeled[1]));
    CHECK(s.iteration() == 1);
  }

  TEST_CASE("perturbations") {
    std::mt19937_64 init(3);
    const Tensor img = testutil::random_tensor<float>({1, 8, 8}, init, 0, 1);
    Perturbation none{0.0, 0.0, {}, 0};
    Rng rng(1);
    CHECK(perturb(img, none, rng) == img);

    Perturbation p;
    Rng r1(1), r2(2);
    CHECK(perturb(img, p, r1) != perturb(img, p, r2));

    const Tensor flat({1, 64, 64}, 0.5f);
    Perturbation noise{0.1, 0.0, {}, 0};
    Rng r3(9);
    const Tensor noisy = perturb(flat, noise, r3);
    double mean = 0, var = 0;
    for (float v : noisy.storage()) mean += v;
    mean /= static_cast<double>(noisy.size());
    for (float v : noisy.storage()) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(noisy.size() - 1));
    CHECK(std::abs(sd - 0.1) < 0.02);
    for (float v : noisy.storage()) CHECK((v >= 0.0f && v <= 1.0f));

    Perturbation bad;
    bad.rotate_choices = {45};
    CHECK_THROWS_AS(bad.validate(), ValueError);
    bad = {};
    bad.flip_prob = 1.5;
    CHECK_THROWS_AS(bad.validate(), ValueError);
  }

  TEST_CASE("geometric transforms: exact on a known grid, class counts preserved, mirrored on masks") {
    // 2x2 plane [[0,1],[2,3]]
    const Tensor grid({1, 2, 2}, std::vector<float>{0, 1, 2, 3});
    CHECK(apply_geometry(grid, {true, 0}).storage() == std::vector<float>{1, 0, 3, 2});
    CHECK(apply_geometry(grid, {false, 1}).storage() == std::vector<float>{1, 3, 0, 2});  // counter-clockwise
    CHECK(apply_geometry(grid, {false, 2}).storage() == std::vector<float>{3, 2, 1, 0});
    CHECK(apply_geometry(apply_geometry(grid, {false, 1}), {false, 3}) == grid);
    CHECK_THROWS_AS(apply_geometry(Tensor({1, 2, 4}), {false, 1}), ShapeError);
    CHECK_NOTHROW(apply_geometry(Tensor({1, 2, 4}), {true, 2}));

    std::mt19937_64 rng(4);
    LabelTensor m({6, 6});
    for (auto& v : m.storage()) v = static_cast<std::uint8_t>(rng() % 4);
    Tensor img({1, 6, 6});
    for (std::size_t i = 0; i < m.size(); ++i) img[i] = m[i];
    Perturbation p;
    for (int trial = 0; trial < 16; ++trial) {
      Rng r(static_cast<std::uint64_t>(trial));
      const auto t = draw_geometry(p, r);
      const LabelTensor mt = apply_geometry(m, t);
      const Tensor it = apply_geometry(img, t);
      for (int c = 0; c < 4; ++c) CHECK(count_class(mt, c) == count_class(m, c));
      for (std::size_t i = 0; i < mt.size(); ++i) CHECK(it[i] == static_cast<float>(mt[i]));
    }
  }

  TEST_CASE("stacking") {
    const Tensor a({1, 2, 2}, 1.0f), b({1, 2, 2}, 2.0f);
    const Tensor s = stack_images({a, b});
    CHECK(s.shape() == Shape{2, 1, 2, 2});
    CHECK(s[4] == 2.0f);
    CHECK_THROWS_AS(stack_images({a, Tensor({1, 3, 2})}), ShapeError);
    CHECK(stack_masks({LabelTensor({2, 2}, 1), LabelTensor({2, 2}, 3)}).shape() == Shape{2, 2, 2});
  }

  TEST_CASE("derived seeds differ across coordinates") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t a = 0; a < 10; ++a)
      for (std::uint64_t b = 0; b < 10; ++b)
        for (std::uint64_t c = 0; c < 3; ++c) seen.insert(derive_seed(1, a, b, c));
    CHECK(seen.size() == 300);
    CHECK(derive_seed(1, 2, 3, 4) == derive_seed(1, 2, 3, 4));
  }
}
