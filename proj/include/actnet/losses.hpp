#pragma once

#include "actnet/tensor.hpp"

namespace actnet {

// Per-pixel class probabilities softmax(logits / temperature) over axis 1.
template <typename T>
struct SoftPrediction {
  BasicTensor<T> probs;
  T temperature{1};
};

struct LossWeights {
  double lambda_kd = 0.5;
  double lambda_co = 0.5;
  double temperature = 20.0;
  double dice_eps = 1e-5;

  void validate() const;
};

// A loss value together with its gradient w.r.t. the student logits.
template <typename T>
struct LossGrad {
  T value{};
  BasicTensor<T> grad;
};

template <typename T>
struct SupervisedLoss {
  T value{};
  T dice{};
  T cross_entropy{};
  BasicTensor<T> grad;
};

// Throws ValueError for non-finite logits or temperature <= 0.
template <typename T>
SoftPrediction<T> soft_prediction(const BasicTensor<T>& logits, T temperature);

// Mean squared difference between two probability maps.
template <typename T>
T kd_consistency_loss(const SoftPrediction<T>& student, const SoftPrediction<T>& teacher);

// Teacher probabilities are constants; the student's are recomputed from
// logits at the teacher's temperature.
template <typename T>
LossGrad<T> kd_consistency_loss_grad(const BasicTensor<T>& student_logits, const SoftPrediction<T>& teacher);

template <typename T>
T co_consistency_loss(const BasicTensor<T>& student_probs, const BasicTensor<T>& coteacher_probs);

// Student probabilities at temperature 1; co-teacher side constant.
template <typename T>
LossGrad<T> co_consistency_loss_grad(const BasicTensor<T>& student_logits, const BasicTensor<T>& coteacher_probs);

// Soft multiclass dice (background included, classes pooled over the whole
// batch, smoothing eps on numerator and denominator) plus mean pixelwise
// cross-entropy. labels: [B, H, W] class indices.
template <typename T>
SupervisedLoss<T> supervised_loss(const BasicTensor<T>& logits, const LabelTensor& labels, T eps);

double student_total_loss(double seg, double kd, double co, const LossWeights& w);

}  // namespace actnet
