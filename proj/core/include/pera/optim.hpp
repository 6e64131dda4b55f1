#pragma once

#include <cstdint>

#include "pera/model.hpp"

namespace pera {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW update of a single tensor; `t` is the 1-based step count used for
/// bias correction.
template <class T>
void adamw_update(Mat<T>& w, const Mat<T>& grad, Mat<T>& m, Mat<T>& v, std::int64_t t, double lr,
                  double weight_decay, const AdamWConfig& cfg);

/// Adam with decoupled weight decay. Decay applies to tensors flagged in
/// param_refs (weight matrices); biases, norms, tokens and positions are
/// exempt.
template <class T>
struct AdamW {
  NetworkParams<T> m;
  NetworkParams<T> v;
  std::int64_t t = 0;

  static AdamW init(const NetworkParams<T>& like) {
    return AdamW{zeros_like(like), zeros_like(like), 0};
  }

  void step(NetworkParams<T>& params, const NetworkParams<T>& grads, double lr, double weight_decay,
            const AdamWConfig& cfg);
};

/// Scales grads so that their global L2 norm is at most max_norm; returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(NetworkParams<T>& grads, double max_norm);

}  // namespace pera
