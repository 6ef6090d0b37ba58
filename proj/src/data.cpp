#include "actnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "actnet/image_io.hpp"

namespace actnet {

namespace fs = std::filesystem;

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "val") return Split::Val;
  if (text == "test") return Split::Test;
  throw DataError("unknown split '" + text + "' (expected train, val or test)");
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, '\t');) cols.push_back(col);
    if (lineno == 1 && !cols.empty() && cols[0] == "id") continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cols.size() != 3) throw DataError(where + ": expected 3 tab-separated columns (id, split, labeled)");
    if (cols[2] != "0" && cols[2] != "1") throw DataError(where + ": labeled must be 0 or 1");
    if (!seen.insert(cols[0]).second) throw DataError(where + ": duplicate id " + cols[0]);
    ManifestEntry e;
    e.id = cols[0];
    try {
      e.split = parse_split(cols[1]);
    } catch (const DataError& err) {
      throw DataError(where + ": " + err.what());
    }
    e.labeled = cols[2] == "1";
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const fs::path& path, std::vector<ManifestEntry> entries) {
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << "id\tsplit\tlabeled\n";
  for (const auto& e : entries) out << e.id << '\t' << to_string(e.split) << '\t' << (e.labeled ? 1 : 0) << '\n';
  if (!out) throw DataError("failed writing manifest " + path.string());
}

Tensor normalize_slice(const std::vector<std::uint16_t>& samples, int height, int width) {
  Tensor t({1, height, width});
  if (samples.empty()) return t;
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  const double range = static_cast<double>(*hi) - *lo;
  if (range <= 0) return t;
  for (std::size_t i = 0; i < samples.size(); ++i)
    t[i] = static_cast<float>((static_cast<double>(samples[i]) - *lo) / range);
  return t;
}

void save_mask(const fs::path& path, const LabelTensor& mask) {
  if (mask.rank() != 2) throw ShapeError("save_mask: expected [H, W], got " + to_string(mask.shape()));
  write_png_gray8(path, static_cast<int>(mask.dim(1)), static_cast<int>(mask.dim(0)), mask.storage());
}

LabelTensor load_mask(const fs::path& path, int num_classes) {
  const GrayImage img = read_png_gray(path);
  if (img.bit_depth != 8) throw DataError("mask " + path.string() + " must be 8-bit");
  LabelTensor m({img.height, img.width});
  for (std::size_t i = 0; i < img.samples.size(); ++i) {
    if (img.samples[i] >= num_classes)
      throw DataError("mask " + path.string() + " contains class " + std::to_string(img.samples[i]) + " but only " +
                      std::to_string(num_classes) + " classes are configured");
    m[i] = static_cast<std::uint8_t>(img.samples[i]);
  }
  return m;
}

DatasetSplits load_dataset(const fs::path& root, const fs::path& manifest, int num_classes) {
  auto entries = read_manifest(manifest);
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  DatasetSplits out;
  int height = -1, width = -1;
  for (const auto& e : entries) {
    const fs::path image_path = root / "images" / (e.id + ".png");
    const GrayImage img = read_png_gray(image_path);
    if (height < 0) {
      height = img.height;
      width = img.width;
    } else if (img.height != height || img.width != width) {
      throw DataError("image " + image_path.string() + " is " + std::to_string(img.width) + "x" +
                      std::to_string(img.height) + ", expected " + std::to_string(width) + "x" + std::to_string(height));
    }
    SliceSample s;
    s.id = e.id;
    s.image = normalize_slice(img.samples, img.height, img.width);
    const bool want_mask = e.split != Split::Train || e.labeled;
    if (want_mask) {
      const fs::path mask_path = root / "masks" / (e.id + ".png");
      LabelTensor m = load_mask(mask_path, num_classes);
      if (m.dim(0) != img.height || m.dim(1) != img.width)
        throw DataError("mask " + mask_path.string() + " size does not match its image");
      s.mask = std::move(m);
    }
    switch (e.split) {
      case Split::Train: (e.labeled ? out.train_labeled : out.train_unlabeled).push_back(std::move(s)); break;
      case Split::Val: out.val.push_back(std::move(s)); break;
      case Split::Test: out.test.push_back(std::move(s)); break;
    }
  }
  return out;
}

DatasetSplits load_dataset(const fs::path& root, int num_classes) {
  return load_dataset(root, root / "manifest.tsv", num_classes);
}

// ---------------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ a);
  h = splitmix(h ^ (b * 0x9e3779b97f4a7c15ULL));
  return splitmix(h ^ (c * 0xc2b2ae3d27d4eb4fULL));
}

namespace {

// Portable draws: libstdc++ distributions are not specified bit-for-bit.
double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }
double gaussian(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

struct SyntheticSlice {
  std::vector<std::uint8_t> image, mask;
};

SyntheticSlice draw_slice(int side, Rng& rng) {
  const double s = side;
  for (;;) {
    const double cx = s / 2 + uniform(rng, -0.12, 0.12) * s;
    const double cy = s / 2 + uniform(rng, -0.12, 0.12) * s;
    const double r_lv = uniform(rng, 0.07, 0.12) * s;
    const double wall = uniform(rng, 0.035, 0.06) * s;
    const double ecc = uniform(rng, 0.85, 1.15);
    const double rv_angle = std::numbers::pi + uniform(rng, -0.6, 0.6);
    const double rv_a = uniform(rng, 0.08, 0.13) * s;
    const double rv_b = uniform(rng, 0.05, 0.08) * s;
    const double rv_dist = r_lv + wall + 0.55 * rv_b;
    const double rx = cx + std::cos(rv_angle) * rv_dist, ry = cy + std::sin(rv_angle) * rv_dist;
    const double reach = std::max(r_lv + wall, rv_dist + rv_a) + 2;
    if (cx - reach < 0 || cy - reach < 0 || cx + reach >= s || cy + reach >= s) continue;

    const double body_a = uniform(rng, 0.36, 0.46) * s, body_b = uniform(rng, 0.3, 0.4) * s;
    const double i_bg = uniform(rng, 0.02, 0.15), i_body = uniform(rng, 0.25, 0.4);
    const double i_myo = uniform(rng, 0.2, 0.35), i_lv = uniform(rng, 0.65, 0.95), i_rv = uniform(rng, 0.55, 0.9);
    const double noise = uniform(rng, 0.02, 0.07);
    const double gx = uniform(rng, -0.1, 0.1), gy = uniform(rng, -0.1, 0.1);

    struct Blob {
      double x, y, r, v;
    };
    std::vector<Blob> blobs;
    const int n_blobs = 1 + static_cast<int>(rng() % 3);
    for (int b = 0; b < n_blobs; ++b) {
      const double br = uniform(rng, 0.03, 0.06) * s;
      double bx = 0, by = 0;
      for (int tries = 0; tries < 20; ++tries) {
        bx = uniform(rng, br, s - br);
        by = uniform(rng, br, s - br);
        if (std::hypot(bx - cx, by - cy) > reach + br + 2) break;
      }
      if (std::hypot(bx - cx, by - cy) > reach + br + 2) blobs.push_back({bx, by, br, uniform(rng, 0.6, 0.95)});
    }

    SyntheticSlice out;
    const auto n = static_cast<std::size_t>(side) * static_cast<std::size_t>(side);
    std::vector<double> img(n);
    out.mask.assign(n, 0);
    const double ca = std::cos(rv_angle), sa = std::sin(rv_angle);
    std::size_t count[4] = {0, 0, 0, 0};
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(side) + static_cast<std::size_t>(x);
        double v = i_bg + gx * (px / s - 0.5) + gy * (py / s - 0.5);
        const double bdx = (px - s / 2) / body_a, bdy = (py - s / 2) / body_b;
        if (bdx * bdx + bdy * bdy <= 1) v = i_body;
        for (const auto& b : blobs)
          if (std::hypot(px - b.x, py - b.y) <= b.r) v = b.v;
        const double d = std::hypot((px - cx) * ecc, (py - cy) / ecc);
        // RV ellipse with its minor axis pointing at the LV centre
        const double u = (px - rx) * ca + (py - ry) * sa, w = -(px - rx) * sa + (py - ry) * ca;
        std::uint8_t cls = 0;
        if (d <= r_lv) {
          cls = 3;
          v = i_lv;
        } else if (d <= r_lv + wall) {
          cls = 2;
          v = i_myo;
        } else if ((u / rv_b) * (u / rv_b) + (w / rv_a) * (w / rv_a) <= 1) {
          cls = 1;
          v = i_rv;
        }
        out.mask[i] = cls;
        ++count[cls];
        img[i] = v;
      }
    const std::size_t min_px = std::max<std::size_t>(4, n / 1000);
    if (count[1] < min_px || count[2] < min_px || count[3] < min_px) continue;

    // 3x3 box blur for soft boundaries, then noise
    std::vector<double> blurred(n);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        double acc = 0;
        int k = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= side || xx < 0 || xx >= side) continue;
            acc += img[static_cast<std::size_t>(yy) * static_cast<std::size_t>(side) + static_cast<std::size_t>(xx)];
            ++k;
          }
        blurred[static_cast<std::size_t>(y) * static_cast<std::size_t>(side) + static_cast<std::size_t>(x)] = acc / k;
      }
    out.image.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = std::clamp(blurred[i] + noise * gaussian(rng), 0.0, 1.0);
      out.image[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
  }
}

}  // namespace

void generate_synthetic(int count, int side, std::uint64_t seed, const fs::path& out) {
  if (count < 1) throw DataError("synthetic count must be >= 1");
  if (side < 8 || side % 8 != 0) throw DataError("synthetic side must be a positive multiple of 8");
  std::error_code ec;
  fs::create_directories(out / "images", ec);
  fs::create_directories(out / "masks", ec);
  if (ec || !fs::is_directory(out / "images") || !fs::is_directory(out / "masks"))
    throw DataError("cannot create dataset directories under " + out.string());

  std::vector<ManifestEntry> entries;
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "slice_%05d", i);
    Rng rng(derive_seed(seed, 0x5e7d, static_cast<std::uint64_t>(i)));
    const SyntheticSlice s = draw_slice(side, rng);
    write_png_gray8(out / "images" / (std::string(id) + ".png"), side, side, s.image);
    write_png_gray8(out / "masks" / (std::string(id) + ".png"), side, side, s.mask);
    entries.push_back({id, Split::Train, false});
  }

  // 70/10/20 split over a seeded permutation; 10% of train labeled.
  std::vector<std::size_t> order(entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5b1d));
  shuffle(order, rng);
  const std::size_t n_val = entries.size() / 10;
  const std::size_t n_test = entries.size() / 5;
  const std::size_t n_train = entries.size() - n_val - n_test;
  const std::size_t n_labeled = std::max<std::size_t>(1, (n_train + 5) / 10);
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& e = entries[order[k]];
    if (k < n_train) {
      e.split = Split::Train;
      e.labeled = k < n_labeled;
    } else if (k < n_train + n_val) {
      e.split = Split::Val;
      e.labeled = true;
    } else {
      e.split = Split::Test;
      e.labeled = true;
    }
  }
  write_manifest(out / "manifest.tsv", entries);
}

// ---------------------------------------------------------------------------

SemiBatchSampler::SemiBatchSampler(std::size_t labeled_pool, std::size_t unlabeled_pool, BatchConfig config,
                                   std::uint64_t seed)
    : labeled_pool_(labeled_pool), unlabeled_pool_(unlabeled_pool), config_(config), seed_(seed) {
  if (config.labeled < 0 || config.unlabeled < 0) throw ValueError("batch counts must be >= 0");
  auto check = [&](std::size_t pool, int want, const char* which) {
    if (want > 0 && pool == 0) throw DataError(std::string(which) + " pool is empty but the batch requests " + std::to_string(want));
    if (!config.cycle && static_cast<std::size_t>(want) > pool)
      throw DataError(std::string(which) + " batch count " + std::to_string(want) + " exceeds pool size " +
                      std::to_string(pool) + " with cycling disabled");
  };
  check(labeled_pool, config.labeled, "labeled");
  check(unlabeled_pool, config.unlabeled, "unlabeled");
}

std::vector<std::size_t> SemiBatchSampler::draw(std::size_t pool, int count, std::uint64_t stream,
                                                std::int64_t iteration) const {
  std::vector<std::size_t> out;
  if (count == 0) return out;
  auto permutation = [&](std::int64_t epoch) {
    std::vector<std::size_t> p(pool);
    for (std::size_t i = 0; i < pool; ++i) p[i] = i;
    Rng rng(derive_seed(seed_, stream, static_cast<std::uint64_t>(epoch)));
    shuffle(p, rng);
    return p;
  };
  const auto n = static_cast<std::int64_t>(pool);
  const auto c = static_cast<std::int64_t>(count);
  if (!config_.cycle) {
    // whole batches per epoch, remainder dropped
    const std::int64_t per_epoch = n / c;
    const auto perm = permutation(iteration / per_epoch);
    const std::int64_t start = (iteration % per_epoch) * c;
    for (std::int64_t j = 0; j < c; ++j) out.push_back(perm[static_cast<std::size_t>(start + j)]);
    return out;
  }
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm;
  for (std::int64_t j = 0; j < c; ++j) {
    const std::int64_t k = iteration * c + j;
    const std::int64_t epoch = k / n;
    if (epoch != cached_epoch) {
      perm = permutation(epoch);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(k % n)]);
  }
  return out;
}

SemiBatchSampler::Indices SemiBatchSampler::indices_at(std::int64_t iteration) const {
  if (iteration < 0) throw ValueError("negative iteration");
  return {draw(labeled_pool_, config_.labeled, 1, iteration), draw(unlabeled_pool_, config_.unlabeled, 2, iteration)};
}

SemiBatchSampler::Indices SemiBatchSampler::next() { return indices_at(iteration_++); }

SemiBatch next_batch(const std::vector<SliceSample>& labeled_pool, const std::vector<SliceSample>& unlabeled_pool,
                     SemiBatchSampler& sampler) {
  const auto idx = sampler.next();
  SemiBatch b;
  for (auto i : idx.labeled) b.labeled.push_back(&labeled_pool.at(i));
  for (auto i : idx.unlabeled) b.unlabeled.push_back(&unlabeled_pool.at(i));
  return b;
}

// ---------------------------------------------------------------------------

void Perturbation::validate() const {
  if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) throw ValueError("noise_sigma must be >= 0");
  if (!(flip_prob >= 0 && flip_prob <= 1)) throw ValueError("flip_prob must be in [0, 1]");
  for (int r : rotate_choices)
    if (r % 90 != 0) throw ValueError("rotation " + std::to_string(r) + " is not a multiple of 90 degrees");
}

GeometricTransform draw_geometry(const Perturbation& p, Rng& rng) {
  GeometricTransform t;
  t.flip = uniform01(rng) < p.flip_prob;
  if (!p.rotate_choices.empty()) {
    const int deg = p.rotate_choices[static_cast<std::size_t>(rng() % p.rotate_choices.size())];
    t.quarter_turns = ((deg / 90) % 4 + 4) % 4;
  }
  return t;
}

template <typename T>
BasicTensor<T> apply_geometry(const BasicTensor<T>& planes, const GeometricTransform& t) {
  if (planes.rank() < 2) throw ShapeError("apply_geometry: expected [..., H, W]");
  if (t.identity()) return planes;
  const std::int64_t h = planes.dim(planes.rank() - 2), w = planes.dim(planes.rank() - 1);
  if (t.quarter_turns % 2 == 1 && h != w)
    throw ShapeError("apply_geometry: 90/270 degree rotation needs square planes, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  BasicTensor<T> out(planes.shape());
  const std::size_t plane = static_cast<std::size_t>(h * w);
  const std::size_t count = planes.size() / plane;
  for (std::size_t p = 0; p < count; ++p) {
    const T* src = planes.ptr() + p * plane;
    T* dst = out.ptr() + p * plane;
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t c = 0; c < w; ++c) {
        // source pixel of destination (r, c): undo rotation, then undo flip
        std::int64_t sr = r, sc = c;
        for (int q = 0; q < t.quarter_turns; ++q) {
          // inverse of one CCW quarter turn on a square: (r, c) <- (c, n-1-r)
          const std::int64_t nr = sc, nc = h - 1 - sr;
          sr = nr;
          sc = nc;
        }
        if (t.flip) sc = w - 1 - sc;
        dst[r * w + c] = src[sr * w + sc];
      }
  }
  return out;
}

template Tensor apply_geometry(const Tensor&, const GeometricTransform&);
template LabelTensor apply_geometry(const LabelTensor&, const GeometricTransform&);

Tensor add_noise(const Tensor& image, double sigma, Rng& rng) {
  if (sigma <= 0) return image;
  Tensor out(image.shape());
  auto put = [&](std::size_t i, double z) {
    out[i] = static_cast<float>(std::clamp(static_cast<double>(image[i]) + sigma * z, 0.0, 1.0));
  };
  // Box-Muller pairs: both the cosine and sine draws are used.
  std::size_t i = 0;
  for (; i + 1 < image.size(); i += 2) {
    const double r = std::sqrt(-2.0 * std::log(1.0 - uniform01(rng)));
    const double a = 2.0 * std::numbers::pi * uniform01(rng);
    put(i, r * std::cos(a));
    put(i + 1, r * std::sin(a));
  }
  if (i < image.size()) put(i, gaussian(rng));
  return out;
}

Tensor perturb(const Tensor& image, const Perturbation& p, Rng& rng) {
  const GeometricTransform t = draw_geometry(p, rng);
  return add_noise(apply_geometry(image, t), p.noise_sigma, rng);
}

Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty list");
  const Shape& s = images.front().shape();
  Shape out_shape{static_cast<std::int64_t>(images.size())};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out(out_shape);
  const std::size_t item = images.front().size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_shape(images[i].shape(), s, "stack_images");
    std::copy(images[i].storage().begin(), images[i].storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(i * item));
  }
  return out;
}

LabelTensor stack_masks(const std::vector<LabelTensor>& masks) {
  if (masks.empty()) throw ShapeError("stack_masks: empty list");
  const Shape& s = masks.front().shape();
  LabelTensor out({static_cast<std::int64_t>(masks.size()), s.at(0), s.at(1)});
  const std::size_t item = masks.front().size();
  for (std::size_t i = 0; i < masks.size(); ++i) {
    require_same_shape(masks[i].shape(), s, "stack_masks");
    std::copy(masks[i].storage().begin(), masks[i].storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(i * item));
  }
  return out;
}

}  // namespace actnet
