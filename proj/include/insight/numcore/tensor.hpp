#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "insight/error.hpp"

namespace insight {

/// Dense row-major matrix of 64-bit reals. Every activation, parameter and
/// gradient in the model is one of these.
using Tensor2 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Boolean attention mask; `true` marks a blocked (query, key) pair.
using AttentionMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <class Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

inline bool all_finite(const Tensor2& t) { return t.allFinite(); }

inline Tensor2 zeros_like(const Tensor2& t) { return Tensor2::Zero(t.rows(), t.cols()); }

}  // namespace insight
