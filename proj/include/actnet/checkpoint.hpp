#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "actnet/model.hpp"

namespace actnet {

using NamedTensor = std::pair<std::string, Tensor>;

// Parameters and normalization buffers of one model, by name.
struct ModelState {
  ModelSpec spec;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;
};

ModelState capture(const UNet& model);
// Throws ShapeError unless names and shapes match the model exactly.
void load_into(UNet& model, const ModelState& state);
UNet make_model(const ModelState& state);

// Single-file training snapshot. Version 1 layout: magic, version, then
// length-prefixed little-endian fields, then an FNV-1a trailer over the body.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_text;
  std::string config_digest;
  std::int64_t iteration = 0;

  ModelState student;
  std::vector<Tensor> velocity;  // one per student parameter, or empty

  bool has_ema = false;
  double ema_decay = 0;
  bool ema_warmup = false;
  std::int64_t ema_steps = 0;
  std::vector<TensorD> ema_shadow;
  std::vector<NamedTensor> ema_buffers;

  bool has_best = false;
  std::int64_t best_iteration = -1;
  double best_val_dsc = -1;
  ModelState best;

  // Best-validation weights when recorded, live weights otherwise.
  const ModelState& selected() const noexcept { return has_best ? best : student; }
};

// Writes atomically via a sibling temporary file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws DataError on a missing, truncated, corrupted or foreign file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace actnet
