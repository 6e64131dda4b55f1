#include "pera/optim.hpp"

#include <cmath>

namespace pera {

template <class T>
void adamw_update(Mat<T>& w, const Mat<T>& grad, Mat<T>& m, Mat<T>& v, std::int64_t t, double lr,
                  double weight_decay, const AdamWConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const auto b1 = static_cast<T>(cfg.beta1);
  const auto b2 = static_cast<T>(cfg.beta2);
  const auto step_size = static_cast<T>(lr / bc1);
  const auto sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
  const auto eps = static_cast<T>(cfg.eps);
  if (weight_decay > 0.0) w *= static_cast<T>(1.0 - lr * weight_decay);
  m = m * b1 + grad * (static_cast<T>(1) - b1);
  v = v * b2 + grad.cwiseAbs2() * (static_cast<T>(1) - b2);
  w.array() -= step_size * m.array() / (v.array().sqrt() / sqrt_bc2 + eps);
}

template <class T>
void AdamW<T>::step(NetworkParams<T>& params, const NetworkParams<T>& grads, double lr,
                    double weight_decay, const AdamWConfig& cfg) {
  ++t;
  auto p = param_refs(params);
  const auto g = param_refs(grads);
  auto mm = param_refs(m);
  auto vv = param_refs(v);
  for (std::size_t i = 0; i < p.size(); ++i) {
    adamw_update(*p[i].tensor, *g[i].tensor, *mm[i].tensor, *vv[i].tensor, t, lr,
                 p[i].decay ? weight_decay : 0.0, cfg);
  }
}

template <class T>
double clip_grad_norm(NetworkParams<T>& grads, double max_norm) {
  double sq = 0.0;
  auto refs = param_refs(grads);
  for (const auto& r : refs) sq += static_cast<double>(r.tensor->squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto& r : refs) *r.tensor *= scale;
  }
  return norm;
}

template void adamw_update<float>(MatF&, const MatF&, MatF&, MatF&, std::int64_t, double, double,
                                  const AdamWConfig&);
template void adamw_update<double>(MatD&, const MatD&, MatD&, MatD&, std::int64_t, double, double,
                                   const AdamWConfig&);
template struct AdamW<float>;
template struct AdamW<double>;
template double clip_grad_norm<float>(NetworkParams<float>&, double);
template double clip_grad_norm<double>(NetworkParams<double>&, double);

}  // namespace pera
