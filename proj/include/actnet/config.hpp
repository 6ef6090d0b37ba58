#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "actnet/data.hpp"
#include "actnet/losses.hpp"
#include "actnet/model.hpp"

namespace actnet {

// FS: seg only. MT: seg + co. KD: seg + kd. ACT: all three.
enum class TrainMode { FS, MT, KD, ACT };

std::string to_string(TrainMode mode);
TrainMode parse_mode(const std::string& text);

bool uses_kd(TrainMode mode) noexcept;
bool uses_co(TrainMode mode) noexcept;

struct TrainConfig {
  ModelSpec student_spec{3, 8, 1, 4, 64};
  ModelSpec teacher_spec{4, 16, 1, 4, 64};
  LossWeights weights;
  TrainMode mode = TrainMode::ACT;
  double ema_decay = 0.99;
  bool ema_warmup = false;
  double base_lr = 0.01;
  double momentum = 0.9;
  std::int64_t t_max = 30000;
  BatchConfig batch;
  Perturbation perturbation;
  // Sigmoid ramp-up of both consistency weights over this many iterations;
  // 0 disables it.
  std::int64_t consistency_rampup = 0;
  std::int64_t eval_every = 200;
  std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 0;
  std::uint64_t init_seed = 0;
  bool from_scratch = false;

  void validate() const;
};

// Every key accepted by the config file, mapped to its current value.
std::map<std::string, std::string> to_key_values(const TrainConfig& config);
// Applies one key=value assignment. Throws ConfigError for unknown keys or
// malformed values.
void apply_setting(TrainConfig& config, const std::string& key, const std::string& value);
// Parses "key=value" lines; '#' starts a comment. Later lines override earlier.
void apply_config_text(TrainConfig& config, const std::string& text, const std::string& origin = "<config>");
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
std::string config_text(const TrainConfig& config);

// Hex FNV-1a digest of the canonical key=value rendering.
std::string config_digest(const TrainConfig& config);

}  // namespace actnet
