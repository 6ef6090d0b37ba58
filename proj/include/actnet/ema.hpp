#pragma once

#include <cstdint>
#include <vector>

#include "actnet/model.hpp"

namespace actnet {

// Co-teacher: exponential moving average of a student's parameters.
//
// Shadow parameters are kept in double precision so that repeated updates
// follow theta_c <- a * theta_c + (1 - a) * theta_s without float drift; a
// float model is materialized from them for forward passes. Normalization
// running statistics are copied from the student on every update.
class EmaState {
 public:
  EmaState(const UNet& student, double decay, bool warmup = false);

  double decay() const noexcept { return decay_; }
  bool warmup() const noexcept { return warmup_; }
  std::int64_t step_count() const noexcept { return step_count_; }
  const ModelSpec& spec() const noexcept { return model_.spec(); }

  // Decay actually applied at the next update: min(a, (t + 1) / (t + 10))
  // when warm-up is enabled, a otherwise.
  double effective_decay() const noexcept;

  const std::vector<TensorD>& shadow() const noexcept { return shadow_; }
  const std::vector<Buffer<float>>& shadow_buffers() const noexcept { return model_.buffers(); }

  // Inference-mode forward through the shadow weights.
  Tensor forward(const Tensor& images);
  // Float model carrying the current shadow weights.
  const UNet& model();

  void restore(std::vector<TensorD> shadow, const std::vector<Buffer<float>>& buffers, std::int64_t step_count);

 private:
  friend void ema_update(EmaState& state, const UNet& student);
  void sync_model();

  double decay_;
  bool warmup_;
  std::int64_t step_count_ = 0;
  std::vector<TensorD> shadow_;
  UNet model_;
  bool model_stale_ = false;
};

// Throws ValueError unless 0 <= decay < 1.
EmaState init_ema(const UNet& student, double decay, bool warmup = false);

// shadow <- decay * shadow + (1 - decay) * student, element-wise. The student
// is not modified. Throws ShapeError if the parameter lists are not congruent.
void ema_update(EmaState& state, const UNet& student);

// Throws ShapeError if template_spec differs from the tracked architecture.
Tensor coteacher_forward(EmaState& state, const ModelSpec& template_spec, const Tensor& images);

}  // namespace actnet
