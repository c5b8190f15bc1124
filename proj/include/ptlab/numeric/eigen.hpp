#pragma once

#include <Eigen/Core>

#include "ptlab/numeric/tensor.hpp"

namespace ptlab {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatView = Eigen::Map<RowMat>;
using ConstMatView = Eigen::Map<const RowMat>;

/// Views a tensor as a matrix of rows() x last_dim().
inline ConstMatView as_matrix(const Tensor& t) {
  return ConstMatView(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.last_dim()));
}

inline MatView as_matrix(Tensor& t) {
  return MatView(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.last_dim()));
}

inline void quantize(RowMat& m, Precision p) {
  if (p != Precision::low) return;
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = round_to_float(m.data()[i]);
}

}  // namespace ptlab
