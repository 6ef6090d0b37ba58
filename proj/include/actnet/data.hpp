#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "actnet/tensor.hpp"

namespace actnet {

// One 2-D slice. image is [1, H, W] with values in [0, 1]; mask is [H, W]
// class indices and is present exactly when the slice is labeled.
struct SliceSample {
  Tensor image;
  std::optional<LabelTensor> mask;
  std::string id;

  bool labeled() const noexcept { return mask.has_value(); }
};

enum class Split { Train, Val, Test };

struct ManifestEntry {
  std::string id;
  Split split = Split::Train;
  bool labeled = false;
};

struct DatasetSplits {
  std::vector<SliceSample> train_labeled;
  std::vector<SliceSample> train_unlabeled;
  std::vector<SliceSample> val;
  std::vector<SliceSample> test;
};

std::string to_string(Split split);
Split parse_split(const std::string& text);

// Tab-separated (id, split, labeled) rows, optional "id" header line.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::vector<ManifestEntry> entries);

// Loads root/images/<id>.png and root/masks/<id>.png per the manifest.
// Images are min-max normalized per slice. Masks are loaded for labeled
// training slices and for every validation/test slice. Each split is ordered
// by id. Errors name the offending file.
DatasetSplits load_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest, int num_classes);
DatasetSplits load_dataset(const std::filesystem::path& root, int num_classes);

// Writes a mask as an 8-bit PNG whose pixel values are the class indices.
void save_mask(const std::filesystem::path& path, const LabelTensor& mask);
LabelTensor load_mask(const std::filesystem::path& path, int num_classes);

// Per-slice min-max normalization to [0, 1]; constant slices map to 0.
Tensor normalize_slice(const std::vector<std::uint16_t>& samples, int height, int width);

// Writes `count` synthetic cardiac-like slices of side x side pixels: an
// LV-like disk (class 3) inside a MYO-like ring (class 2) with an adjacent
// RV-like crescent (class 1), on a noisy background with bright distractor
// blobs. Also writes manifest.tsv with a 70/10/20 train/val/test split and
// 10% of the training slices labeled. Output is a pure function of
// (count, side, seed).
void generate_synthetic(int count, int side, std::uint64_t seed, const std::filesystem::path& out);

// ---------------------------------------------------------------------------
// Batching

struct BatchConfig {
  int labeled = 10;
  int unlabeled = 10;
  // Pools wrap around into the next epoch; when false a request larger than
  // its pool is an error.
  bool cycle = true;
};

struct SemiBatch {
  std::vector<const SliceSample*> labeled;
  std::vector<const SliceSample*> unlabeled;
};

// Deterministic labeled/unlabeled index stream. Each pool is shuffled once
// per epoch with a permutation derived from (seed, pool, epoch); the two
// pools cycle independently. batch(t) depends only on (sizes, config, seed, t).
class SemiBatchSampler {
 public:
  SemiBatchSampler(std::size_t labeled_pool, std::size_t unlabeled_pool, BatchConfig config, std::uint64_t seed);

  struct Indices {
    std::vector<std::size_t> labeled;
    std::vector<std::size_t> unlabeled;
  };

  Indices indices_at(std::int64_t iteration) const;
  std::int64_t iteration() const noexcept { return iteration_; }
  void seek(std::int64_t iteration) noexcept { iteration_ = iteration; }
  // Indices for the current iteration, then advances.
  Indices next();

  const BatchConfig& config() const noexcept { return config_; }

 private:
  std::vector<std::size_t> draw(std::size_t pool, int count, std::uint64_t stream, std::int64_t iteration) const;

  std::size_t labeled_pool_;
  std::size_t unlabeled_pool_;
  BatchConfig config_;
  std::uint64_t seed_;
  std::int64_t iteration_ = 0;
};

SemiBatch next_batch(const std::vector<SliceSample>& labeled_pool, const std::vector<SliceSample>& unlabeled_pool,
                     SemiBatchSampler& sampler);

// ---------------------------------------------------------------------------
// Perturbations

struct Perturbation {
  double noise_sigma = 0.1;
  double flip_prob = 0.5;
  std::vector<int> rotate_choices{0, 90, 180, 270};  // degrees, multiples of 90
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Horizontal flip followed by counter-clockwise rotation.
struct GeometricTransform {
  bool flip = false;
  int quarter_turns = 0;

  bool identity() const noexcept { return !flip && quarter_turns == 0; }
};

using Rng = std::mt19937_64;

// Mixes a base seed with stream coordinates into an independent seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

GeometricTransform draw_geometry(const Perturbation& p, Rng& rng);

// Applies t to every [H, W] plane of a [..., H, W] tensor. Odd quarter turns
// require square planes.
template <typename T>
BasicTensor<T> apply_geometry(const BasicTensor<T>& planes, const GeometricTransform& t);

// Adds N(0, sigma^2) noise and clips to [0, 1].
Tensor add_noise(const Tensor& image, double sigma, Rng& rng);

// flip -> rot90 -> noise, all drawn from rng.
Tensor perturb(const Tensor& image, const Perturbation& p, Rng& rng);

// Stacks [1, H, W] images into [B, 1, H, W] / [H, W] masks into [B, H, W].
Tensor stack_images(const std::vector<Tensor>& images);
LabelTensor stack_masks(const std::vector<LabelTensor>& masks);

}  // namespace actnet
