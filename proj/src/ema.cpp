#include "actnet/ema.hpp"

#include <algorithm>
#include <string>

namespace actnet {

EmaState::EmaState(const UNet& student, double decay, bool warmup)
    : decay_(decay), warmup_(warmup), model_(student.spec(), 0) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ValueError("EMA decay must be in [0, 1), got " + std::to_string(decay));
  shadow_.reserve(student.parameters().size());
  for (const auto& p : student.parameters()) shadow_.push_back(tensor_cast<double>(p.value));
  for (std::size_t i = 0; i < student.buffers().size(); ++i)
    model_.buffers()[i].value = student.buffers()[i].value;
  for (std::size_t i = 0; i < shadow_.size(); ++i) model_.parameters()[i].value = student.parameters()[i].value;
}

double EmaState::effective_decay() const noexcept {
  if (!warmup_) return decay_;
  const double t = static_cast<double>(step_count_);
  return std::min(decay_, (t + 1.0) / (t + 10.0));
}

void EmaState::sync_model() {
  if (!model_stale_) return;
  auto& params = model_.parameters();
  for (std::size_t i = 0; i < shadow_.size(); ++i) {
    auto& dst = params[i].value.storage();
    const auto& src = shadow_[i].storage();
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<float>(src[k]);
  }
  model_stale_ = false;
}

const UNet& EmaState::model() {
  sync_model();
  return model_;
}

Tensor EmaState::forward(const Tensor& images) {
  sync_model();
  return model_.forward(images, Phase::Eval);
}

void EmaState::restore(std::vector<TensorD> shadow, const std::vector<Buffer<float>>& buffers,
                       std::int64_t step_count) {
  if (shadow.size() != shadow_.size() || buffers.size() != model_.buffers().size())
    throw ShapeError("EMA restore: parameter list size mismatch");
  for (std::size_t i = 0; i < shadow.size(); ++i) require_same_shape(shadow[i].shape(), shadow_[i].shape(), "EMA restore");
  for (std::size_t i = 0; i < buffers.size(); ++i)
    require_same_shape(buffers[i].value.shape(), model_.buffers()[i].value.shape(), "EMA restore buffers");
  shadow_ = std::move(shadow);
  for (std::size_t i = 0; i < buffers.size(); ++i) model_.buffers()[i].value = buffers[i].value;
  step_count_ = step_count;
  model_stale_ = true;
}

EmaState init_ema(const UNet& student, double decay, bool warmup) { return EmaState(student, decay, warmup); }

void ema_update(EmaState& state, const UNet& student) {
  const auto& params = student.parameters();
  if (params.size() != state.shadow_.size())
    throw ShapeError("ema_update: student has " + std::to_string(params.size()) + " parameters, shadow has " +
                     std::to_string(state.shadow_.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].value.shape() != state.shadow_[i].shape())
      throw ShapeError("ema_update: shape mismatch for " + params[i].name + ": " + to_string(params[i].value.shape()) +
                       " vs " + to_string(state.shadow_[i].shape()));
  const double a = state.effective_decay();
  const double b = 1.0 - a;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& s = state.shadow_[i].storage();
    const auto& p = params[i].value.storage();
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = a * s[k] + b * static_cast<double>(p[k]);
  }
  auto& buffers = state.model_.buffers();
  for (std::size_t i = 0; i < buffers.size(); ++i) buffers[i].value = student.buffers()[i].value;
  state.model_stale_ = true;
  ++state.step_count_;
}

Tensor coteacher_forward(EmaState& state, const ModelSpec& template_spec, const Tensor& images) {
  if (!(template_spec == state.spec()))
    throw ShapeError("coteacher_forward: template " + to_string(template_spec) + " does not match co-teacher " +
                     to_string(state.spec()));
  return state.forward(images);
}

}  // namespace actnet
