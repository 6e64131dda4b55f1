#pragma once

#include <Eigen/Dense>

namespace pera {

/// Row-major dynamic matrix; token sequences are stored one token per row.
/// Vectors (biases, tokens) are 1 x n matrices so every parameter has the same
/// type.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

template <class T>
bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

}  // namespace pera
