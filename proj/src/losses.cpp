#include "actnet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace actnet {

namespace {

template <typename T>
void check_logits(const BasicTensor<T>& logits, const char* what) {
  if (logits.rank() != 4) throw ShapeError(std::string(what) + ": expected [B, C, H, W], got " + to_string(logits.shape()));
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (!std::isfinite(static_cast<double>(logits[i])))
      throw ValueError(std::string(what) + ": non-finite logit at flat index " + std::to_string(i));
}

// Eight independent partial sums keep long reductions vectorizable.
struct LaneSum {
  double acc[8] = {};
  void add(std::int64_t i, double v) { acc[i & 7] += v; }
  double total() const {
    double t = 0;
    for (double a : acc) t += a;
    return t;
  }
};

// Softmax over the class axis, computed plane-wise so the per-pixel loops
// vectorize. When lse is non-null it receives max + log(sum exp) of the
// scaled logits for every (b, pixel).
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits, T temperature, std::vector<T>* lse = nullptr) {
  BasicTensor<T> probs(logits.shape());
  const std::int64_t B = logits.dim(0), C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  const T inv_t = T{1} / temperature;
  if (lse) lse->assign(static_cast<std::size_t>(B * P), T{0});
#pragma omp parallel
  {
    std::vector<T> mx(static_cast<std::size_t>(P)), sum(static_cast<std::size_t>(P));
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
      const T* z = logits.ptr() + b * C * P;
      T* p = probs.ptr() + b * C * P;
      std::copy_n(z, P, mx.begin());
      for (std::int64_t c = 1; c < C; ++c)
        for (std::int64_t px = 0; px < P; ++px) mx[px] = std::max(mx[px], z[c * P + px]);
      std::fill(sum.begin(), sum.end(), T{0});
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t px = 0; px < P; ++px) {
          const T e = std::exp((z[c * P + px] - mx[px]) * inv_t);
          p[c * P + px] = e;
          sum[px] += e;
        }
      for (std::int64_t px = 0; px < P; ++px) sum[px] = T{1} / sum[px];
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t px = 0; px < P; ++px) p[c * P + px] *= sum[px];
      if (lse) {
        T* out = lse->data() + b * P;
        for (std::int64_t px = 0; px < P; ++px) out[px] = mx[px] * inv_t - std::log(sum[px]);
      }
    }
  }
  return probs;
}

// dL/dz given dL/dp for p = softmax(z / t): (1/t) p_k (g_k - sum_c g_c p_c).
template <typename T>
void softmax_backward(const BasicTensor<T>& probs, BasicTensor<T>& grad, double temperature) {
  const std::int64_t B = probs.dim(0), C = probs.dim(1), P = probs.dim(2) * probs.dim(3);
  const T inv_t = static_cast<T>(1.0 / temperature);
#pragma omp parallel
  {
    std::vector<T> dot(static_cast<std::size_t>(P));
#pragma omp for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
      const T* p = probs.ptr() + b * C * P;
      T* g = grad.ptr() + b * C * P;
      std::fill(dot.begin(), dot.end(), T{0});
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t px = 0; px < P; ++px) dot[px] += g[c * P + px] * p[c * P + px];
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t px = 0; px < P; ++px) g[c * P + px] = inv_t * p[c * P + px] * (g[c * P + px] - dot[px]);
    }
  }
}

template <typename T>
T mse(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
  require_same_shape(a.shape(), b.shape(), what);
  if (a.empty()) return T{0};
  LaneSum acc;
  const T* x = a.ptr();
  const T* y = b.ptr();
  const auto n = static_cast<std::int64_t>(a.size());
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    acc.add(i, d * d);
  }
  return static_cast<T>(acc.total() / static_cast<double>(n));
}

template <typename T>
LossGrad<T> mse_through_softmax(const BasicTensor<T>& logits, const BasicTensor<T>& target, T temperature,
                                const char* what) {
  check_logits(logits, what);
  require_same_shape(logits.shape(), target.shape(), what);
  LossGrad<T> out;
  const BasicTensor<T> probs = softmax(logits, temperature);
  out.value = mse(probs, target, what);
  out.grad = BasicTensor<T>(logits.shape());
  const T scale = static_cast<T>(2.0 / static_cast<double>(logits.size()));
  const T* p = probs.ptr();
  const T* q = target.ptr();
  T* g = out.grad.ptr();
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = scale * (p[i] - q[i]);
  softmax_backward(probs, out.grad, static_cast<double>(temperature));
  return out;
}

}  // namespace

void LossWeights::validate() const {
  if (!(temperature > 0)) throw ValueError("temperature must be > 0");
  if (!(dice_eps > 0)) throw ValueError("dice_eps must be > 0");
  if (!(lambda_kd >= 0) || !(lambda_co >= 0)) throw ValueError("loss weights must be >= 0");
}

template <typename T>
SoftPrediction<T> soft_prediction(const BasicTensor<T>& logits, T temperature) {
  if (!(temperature > T{0}) || !std::isfinite(static_cast<double>(temperature)))
    throw ValueError("temperature must be a positive finite number");
  check_logits(logits, "soft_prediction");
  return {softmax(logits, temperature), temperature};
}

template <typename T>
T kd_consistency_loss(const SoftPrediction<T>& student, const SoftPrediction<T>& teacher) {
  if (student.temperature != teacher.temperature)
    throw ValueError("kd_consistency_loss: student and teacher temperatures differ");
  return mse(student.probs, teacher.probs, "kd_consistency_loss");
}

template <typename T>
LossGrad<T> kd_consistency_loss_grad(const BasicTensor<T>& student_logits, const SoftPrediction<T>& teacher) {
  return mse_through_softmax(student_logits, teacher.probs, teacher.temperature, "kd_consistency_loss");
}

template <typename T>
T co_consistency_loss(const BasicTensor<T>& student_probs, const BasicTensor<T>& coteacher_probs) {
  return mse(student_probs, coteacher_probs, "co_consistency_loss");
}

template <typename T>
LossGrad<T> co_consistency_loss_grad(const BasicTensor<T>& student_logits, const BasicTensor<T>& coteacher_probs) {
  return mse_through_softmax(student_logits, coteacher_probs, T{1}, "co_consistency_loss");
}

template <typename T>
SupervisedLoss<T> supervised_loss(const BasicTensor<T>& logits, const LabelTensor& labels, T eps) {
  check_logits(logits, "supervised_loss");
  if (!(eps > T{0})) throw ValueError("supervised_loss: dice smoothing must be > 0");
  const std::int64_t B = logits.dim(0), C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  require_same_shape(labels.shape(), Shape{B, logits.dim(2), logits.dim(3)}, "supervised_loss labels");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= C)
      throw ValueError("supervised_loss: label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(C) + " classes");

  std::vector<T> lse;
  const BasicTensor<T> probs = softmax(logits, T{1}, &lse);
  const double npx = static_cast<double>(B * P);

  std::vector<double> inter(static_cast<std::size_t>(C), 0.0), denom(static_cast<std::size_t>(C), 0.0);
  LaneSum ce_acc;
  for (std::int64_t b = 0; b < B; ++b) {
    const std::uint8_t* y = labels.ptr() + b * P;
    const T* z = logits.ptr() + b * C * P;
    for (std::int64_t px = 0; px < P; ++px)
      ce_acc.add(px, static_cast<double>(lse[static_cast<std::size_t>(b * P + px)]) - z[y[px] * P + px]);
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = probs.ptr() + (b * C + c) * P;
      LaneSum sum_p, hit_p, hits;
      for (std::int64_t px = 0; px < P; ++px) {
        const bool hit = y[px] == c;
        sum_p.add(px, p[px]);
        hit_p.add(px, hit ? static_cast<double>(p[px]) : 0.0);
        hits.add(px, hit ? 1.0 : 0.0);
      }
      denom[static_cast<std::size_t>(c)] += sum_p.total() + hits.total();
      inter[static_cast<std::size_t>(c)] += hit_p.total();
    }
  }
  const double ce = ce_acc.total() / npx;

  double dice_mean = 0;
  const double e = static_cast<double>(eps);
  for (std::int64_t c = 0; c < C; ++c)
    dice_mean += (2 * inter[static_cast<std::size_t>(c)] + e) / (denom[static_cast<std::size_t>(c)] + e);
  dice_mean /= static_cast<double>(C);

  SupervisedLoss<T> out;
  out.dice = static_cast<T>(1.0 - dice_mean);
  out.cross_entropy = static_cast<T>(ce);
  out.value = static_cast<T>((1.0 - dice_mean) + ce);

  // Dice part first as dL/dp, pushed through the softmax; CE added directly
  // in logit space as (p - y) / npx.
  out.grad = BasicTensor<T>(logits.shape());
  for (std::int64_t b = 0; b < B; ++b) {
    const std::uint8_t* y = labels.ptr() + b * P;
    for (std::int64_t c = 0; c < C; ++c) {
      const double s = denom[static_cast<std::size_t>(c)] + e;
      const double num = 2 * inter[static_cast<std::size_t>(c)] + e;
      const T on = static_cast<T>(-(2 * s - num) / (s * s) / static_cast<double>(C));
      const T off = static_cast<T>(num / (s * s) / static_cast<double>(C));
      T* g = out.grad.ptr() + (b * C + c) * P;
      for (std::int64_t px = 0; px < P; ++px) g[px] = y[px] == c ? on : off;
    }
  }
  softmax_backward(probs, out.grad, 1.0);
  const T inv_npx = static_cast<T>(1.0 / npx);
  for (std::int64_t b = 0; b < B; ++b) {
    const std::uint8_t* y = labels.ptr() + b * P;
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = probs.ptr() + (b * C + c) * P;
      T* g = out.grad.ptr() + (b * C + c) * P;
      for (std::int64_t px = 0; px < P; ++px) g[px] += (p[px] - (y[px] == c ? T{1} : T{0})) * inv_npx;
    }
  }
  return out;
}

double student_total_loss(double seg, double kd, double co, const LossWeights& w) {
  if (!std::isfinite(seg) || !std::isfinite(kd) || !std::isfinite(co))
    throw ValueError("student_total_loss: non-finite component");
  return seg + w.lambda_kd * kd + w.lambda_co * co;
}

#define ACTNET_INSTANTIATE(T)                                                                           \
  template SoftPrediction<T> soft_prediction<T>(const BasicTensor<T>&, T);                             \
  template T kd_consistency_loss<T>(const SoftPrediction<T>&, const SoftPrediction<T>&);               \
  template LossGrad<T> kd_consistency_loss_grad<T>(const BasicTensor<T>&, const SoftPrediction<T>&);   \
  template T co_consistency_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template LossGrad<T> co_consistency_loss_grad<T>(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template SupervisedLoss<T> supervised_loss<T>(const BasicTensor<T>&, const LabelTensor&, T);

ACTNET_INSTANTIATE(float)
ACTNET_INSTANTIATE(double)

#undef ACTNET_INSTANTIATE

}  // namespace actnet
