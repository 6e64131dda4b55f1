#pragma once

#include "pera/model.hpp"
#include "pera/tensor.hpp"

namespace pera {

struct Temperatures {
  double student = 0.1;
  double teacher = 0.04;
};

struct LossBreakdown {
  double l_cls = 0.0;
  double l_mse = 0.0;  // unweighted mean squared error
  double w = 1.0;
  double total = 0.0;  // l_cls + w * l_mse
};

/// Row-wise softmax of logits / temperature with max subtraction.
template <class T>
Mat<T> softmax_h(const Mat<T>& logits, double temperature);

/// Mean over rows of -sum_k P_t,k log P_s,k with
/// P_t = softmax_h(teacher - center, tpt_t) and P_s = softmax_h(student, tpt_s).
/// The teacher side is a constant. When d_student is non-null it receives the
/// gradient with respect to the student logits.
template <class T>
double cls_loss(const Mat<T>& student_logits, const Mat<T>& teacher_logits, const Mat<T>& center,
                const Temperatures& temps, Mat<T>* d_student = nullptr);

/// Mean over every element of (pred - target)^2, scaled by w. An empty
/// prediction contributes 0.
template <class T>
double mse_loss(const Mat<T>& pred, const Mat<T>& target, double w, Mat<T>* d_pred = nullptr);

/// Running mean of teacher logits; `momentum` is the weight kept on the old
/// value.
struct Center {
  MatF value;  // 1 x K
  double momentum = 0.9;
};

template <class T>
Mat<T> updated_center(const Mat<T>& center, const Mat<T>& teacher_logits, double momentum);

void update_center(Center& center, const MatF& teacher_logits);

/// teacher <- m * teacher + (1 - m) * student, tensor by tensor.
template <class T>
void ema_update(NetworkParams<T>& teacher, const NetworkParams<T>& student, double momentum);

/// Shannon entropy (nats) of each row of a probability matrix.
template <class T>
Eigen::Matrix<double, Eigen::Dynamic, 1> row_entropy(const Mat<T>& probs);

}  // namespace pera
