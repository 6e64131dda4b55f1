#include "pera/objective.hpp"

#include <cmath>

#include "pera/error.hpp"

namespace pera {

template <class T>
Mat<T> softmax_h(const Mat<T>& logits, double temperature) {
  require(temperature > 0.0, ErrorKind::kContract, "softmax_h: temperature must be > 0");
  if (!logits.allFinite()) fail(ErrorKind::kNumerical, "softmax_h: non-finite logits");
  Mat<T> out = logits / static_cast<T>(temperature);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
  return out;
}

namespace {

template <class T>
Mat<T> log_softmax(const Mat<T>& logits, double temperature) {
  Mat<T> out = logits / static_cast<T>(temperature);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row.array() - mx).exp().sum());
    row.array() -= lse;
  }
  return out;
}

}  // namespace

template <class T>
double cls_loss(const Mat<T>& student_logits, const Mat<T>& teacher_logits, const Mat<T>& center,
                const Temperatures& temps, Mat<T>* d_student) {
  require(student_logits.cols() == teacher_logits.cols() && center.cols() == teacher_logits.cols() &&
              center.rows() == 1,
          ErrorKind::kContract, "cls_loss: prototype count mismatch");
  require(student_logits.rows() == teacher_logits.rows() && student_logits.rows() >= 1,
          ErrorKind::kContract, "cls_loss: batch size mismatch");
  require(temps.student > 0.0 && temps.teacher > 0.0, ErrorKind::kContract,
          "cls_loss: temperatures must be > 0");
  if (!student_logits.allFinite()) fail(ErrorKind::kNumerical, "cls_loss: non-finite student logits");
  const Mat<T> centered = teacher_logits.rowwise() - center.row(0);
  const Mat<T> p_t = softmax_h(centered, temps.teacher);
  const Mat<T> log_p_s = log_softmax(student_logits, temps.student);
  const auto batch = static_cast<double>(student_logits.rows());
  const double loss = -static_cast<double>((p_t.array() * log_p_s.array()).sum()) / batch;
  if (d_student != nullptr) {
    // d/ds of -sum p_t log softmax(s / tau) = (softmax(s / tau) - p_t) / tau
    *d_student = (log_p_s.array().exp() - p_t.array()) / static_cast<T>(temps.student * batch);
  }
  return loss;
}

template <class T>
double mse_loss(const Mat<T>& pred, const Mat<T>& target, double w, Mat<T>* d_pred) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), ErrorKind::kContract,
          "mse_loss: prediction and target shapes differ");
  if (pred.size() == 0) {
    if (d_pred != nullptr) d_pred->resize(pred.rows(), pred.cols());
    return 0.0;
  }
  const Mat<T> diff = pred - target;
  const auto count = static_cast<double>(diff.size());
  const double loss = w * static_cast<double>(diff.squaredNorm()) / count;
  if (d_pred != nullptr) *d_pred = diff * static_cast<T>(2.0 * w / count);
  return loss;
}

template <class T>
Mat<T> updated_center(const Mat<T>& center, const Mat<T>& teacher_logits, double momentum) {
  require(teacher_logits.rows() >= 1, ErrorKind::kContract, "update_center: empty batch");
  require(center.rows() == 1 && center.cols() == teacher_logits.cols(), ErrorKind::kContract,
          "update_center: dimension mismatch");
  const Mat<T> batch_mean = teacher_logits.colwise().mean();
  return center * static_cast<T>(momentum) + batch_mean * static_cast<T>(1.0 - momentum);
}

void update_center(Center& center, const MatF& teacher_logits) {
  center.value = updated_center(center.value, teacher_logits, center.momentum);
}

template <class T>
void ema_update(NetworkParams<T>& teacher, const NetworkParams<T>& student, double momentum) {
  require(momentum >= 0.0 && momentum <= 1.0, ErrorKind::kContract,
          "ema_update: momentum must lie in [0,1]");
  auto dst = param_refs(teacher);
  const auto src = param_refs(student);
  require(dst.size() == src.size(), ErrorKind::kContract, "ema_update: structure mismatch");
  const auto m = static_cast<T>(momentum);
  const auto one_minus = static_cast<T>(1.0 - momentum);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Mat<T>& t = *dst[i].tensor;
    const Mat<T>& s = *src[i].tensor;
    require(t.rows() == s.rows() && t.cols() == s.cols(), ErrorKind::kContract,
            "ema_update: shape mismatch at " + dst[i].name);
    if (momentum == 1.0) continue;
    if (momentum == 0.0) {
      t = s;
    } else {
      t = t * m + s * one_minus;
    }
  }
}

template <class T>
Eigen::Matrix<double, Eigen::Dynamic, 1> row_entropy(const Mat<T>& probs) {
  Eigen::Matrix<double, Eigen::Dynamic, 1> h(probs.rows());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double p = static_cast<double>(probs(r, k));
      if (p > 0.0) acc -= p * std::log(p);
    }
    h(r) = acc;
  }
  return h;
}

#define PERA_INSTANTIATE_OBJECTIVE(T)                                                             \
  template Mat<T> softmax_h<T>(const Mat<T>&, double);                                           \
  template double cls_loss<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const Temperatures&,  \
                              Mat<T>*);                                                          \
  template double mse_loss<T>(const Mat<T>&, const Mat<T>&, double, Mat<T>*);                    \
  template Mat<T> updated_center<T>(const Mat<T>&, const Mat<T>&, double);                       \
  template void ema_update<T>(NetworkParams<T>&, const NetworkParams<T>&, double);               \
  template Eigen::Matrix<double, Eigen::Dynamic, 1> row_entropy<T>(const Mat<T>&);

PERA_INSTANTIATE_OBJECTIVE(float)
PERA_INSTANTIATE_OBJECTIVE(double)

}  // namespace pera
