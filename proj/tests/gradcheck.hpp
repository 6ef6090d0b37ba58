#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "actnet/losses.hpp"

namespace testutil {

// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2) with central
// differences of the given step.
inline double gradient_relative_error(const std::function<double(const actnet::TensorD&)>& f,
                                      const actnet::TensorD& x, const actnet::TensorD& analytic, double step) {
  actnet::TensorD probe = x;
  double diff2 = 0, a2 = 0, n2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double fp = f(probe);
    probe[i] = x[i] - step;
    const double fm = f(probe);
    probe[i] = x[i];
    const double numeric = (fp - fm) / (2 * step);
    diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
    a2 += analytic[i] * analytic[i];
    n2 += numeric * numeric;
  }
  const double denom = std::sqrt(std::max(a2, n2));
  return denom == 0 ? 0.0 : std::sqrt(diff2) / denom;
}

struct LossCase {
  actnet::Shape shape;
  double temperature;
};

inline LossCase random_loss_case(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> b(1, 2), c(2, 4), hw(2, 4);
  const double temps[] = {1.0, 2.0, 5.0, 20.0};
  return {{b(rng), c(rng), hw(rng), hw(rng)}, temps[rng() % 4]};
}

// Worst relative error over `trials` random cases for each loss.
struct GradcheckResult {
  double kd = 0, co = 0, supervised = 0;
};

inline GradcheckResult run_loss_gradchecks(int trials, std::uint64_t seed, double step) {
  using namespace actnet;
  std::mt19937_64 rng(seed);
  GradcheckResult worst;
  for (int trial = 0; trial < trials; ++trial) {
    const LossCase lc = random_loss_case(rng);
    const double span = 3.0 * lc.temperature;
    std::uniform_real_distribution<double> logit(-span, span), unit(-3.0, 3.0);
    TensorD z(lc.shape), zt(lc.shape), zc(lc.shape);
    for (auto& v : z.storage()) v = logit(rng);
    for (auto& v : zt.storage()) v = logit(rng);
    for (auto& v : zc.storage()) v = unit(rng);

    const auto teacher = soft_prediction(zt, lc.temperature);
    const auto kd = kd_consistency_loss_grad(z, teacher);
    worst.kd = std::max(worst.kd, gradient_relative_error(
                                      [&](const TensorD& x) {
                                        return kd_consistency_loss(soft_prediction(x, lc.temperature), teacher);
                                      },
                                      z, kd.grad, step));

    TensorD zs(lc.shape);
    for (auto& v : zs.storage()) v = unit(rng);
    const TensorD co_probs = soft_prediction(zc, 1.0).probs;
    const auto co = co_consistency_loss_grad(zs, co_probs);
    worst.co = std::max(worst.co, gradient_relative_error(
                                      [&](const TensorD& x) {
                                        return co_consistency_loss(soft_prediction(x, 1.0).probs, co_probs);
                                      },
                                      zs, co.grad, step));

    LabelTensor labels({lc.shape[0], lc.shape[2], lc.shape[3]});
    for (auto& v : labels.storage()) v = static_cast<std::uint8_t>(rng() % static_cast<std::uint64_t>(lc.shape[1]));
    const auto sup = supervised_loss(zs, labels, 1e-5);
    worst.supervised = std::max(worst.supervised, gradient_relative_error(
                                                      [&](const TensorD& x) { return supervised_loss(x, labels, 1e-5).value; },
                                                      zs, sup.grad, step));
  }
  return worst;
}

}  // namespace testutil
