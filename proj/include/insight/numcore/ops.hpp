#pragma once

// Forward kernels with explicit backward functions. Callers compose the
// backward passes themselves; there is no tape.

#include <cmath>
#include <limits>
#include <numbers>

#include "insight/numcore/tensor.hpp"

namespace insight {

/// Score assigned to blocked attention entries. Finite, so backward
/// arithmetic never produces NaN; exp(-1e30 - max) underflows to exactly 0.
inline constexpr double kMaskedScore = -1e30;

// ---------------------------------------------------------------- affine

/// y = x W + b, with `b` a 1 x d_out row broadcast over the rows of x.
inline Tensor2 affine(const Tensor2& x, const Tensor2& w, const Tensor2& b) {
  if (x.cols() != w.rows()) {
    throw ShapeError("affine: x " + shape_str(x) + " incompatible with W " + shape_str(w));
  }
  if (b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("affine: bias " + shape_str(b) + " incompatible with W " + shape_str(w));
  }
  Tensor2 y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

struct AffineGrad {
  Tensor2 dx;
  Tensor2 dw;
  Tensor2 db;
};

inline AffineGrad affine_backward(const Tensor2& x, const Tensor2& w, const Tensor2& dy) {
  if (dy.rows() != x.rows() || dy.cols() != w.cols()) {
    throw ShapeError("affine_backward: dy " + shape_str(dy) + " incompatible with x " + shape_str(x) +
                     " and W " + shape_str(w));
  }
  AffineGrad g;
  g.dx = dy * w.transpose();
  g.dw = x.transpose() * dy;
  g.db = dy.colwise().sum();
  return g;
}

// ---------------------------------------------------------------- softmax

/// Row-wise softmax with max subtraction. Terms that underflow to subnormal
/// values are flushed to exactly 0.
inline Tensor2 softmax_rows(const Tensor2& x) {
  Tensor2 y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    auto yr = y.row(r).array();
    yr = (x.row(r).array() - x.row(r).maxCoeff()).exp();
    yr = (yr < std::numeric_limits<double>::min()).select(0.0, yr);
    yr /= yr.sum();
  }
  return y;
}

/// dx = y * (dy - <dy, y>) row by row, given the forward output y.
inline Tensor2 softmax_rows_backward(const Tensor2& y, const Tensor2& dy) {
  if (y.rows() != dy.rows() || y.cols() != dy.cols()) {
    throw ShapeError("softmax_rows_backward: y " + shape_str(y) + " vs dy " + shape_str(dy));
  }
  Tensor2 dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double dot = y.row(r).dot(dy.row(r));
    dx.row(r) = y.row(r).array() * (dy.row(r).array() - dot);
  }
  return dx;
}

// ---------------------------------------------------------------- attention

struct AttentionOutput {
  Tensor2 out;      ///< n x d_v
  Tensor2 weights;  ///< n x m softmax weights; exactly 0 on blocked entries
};

/// Scaled dot-product attention softmax(Q K^T / sqrt(d) + mask) V.
///
/// `mask`, when given, is n x m with `true` meaning blocked. A row with every
/// entry blocked has no defined output and is rejected.
inline AttentionOutput attention(const Tensor2& q, const Tensor2& k, const Tensor2& v,
                                 const AttentionMask* mask = nullptr) {
  if (q.cols() != k.cols()) {
    throw ShapeError("attention: Q " + shape_str(q) + " and K " + shape_str(k) + " differ in width");
  }
  if (k.rows() != v.rows()) {
    throw ShapeError("attention: K " + shape_str(k) + " and V " + shape_str(v) + " differ in length");
  }
  if (mask && (mask->rows() != q.rows() || mask->cols() != k.rows())) {
    throw ShapeError("attention: mask " + shape_str(mask->rows(), mask->cols()) + " does not match scores " +
                     shape_str(q.rows(), k.rows()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor2 scores = (q * k.transpose()) * scale;
  if (mask) {
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      bool any_allowed = false;
      for (Eigen::Index c = 0; c < scores.cols(); ++c) {
        if ((*mask)(r, c)) {
          scores(r, c) = kMaskedScore;
        } else {
          any_allowed = true;
        }
      }
      if (!any_allowed) throw Error("attention row fully masked (row " + std::to_string(r) + ")");
    }
  }
  AttentionOutput o;
  o.weights = softmax_rows(scores);
  o.out = o.weights * v;
  return o;
}

struct AttentionGrad {
  Tensor2 dq;
  Tensor2 dk;
  Tensor2 dv;
};

inline AttentionGrad attention_backward(const Tensor2& q, const Tensor2& k, const Tensor2& v,
                                        const Tensor2& weights, const Tensor2& dout) {
  if (dout.rows() != weights.rows() || dout.cols() != v.cols()) {
    throw ShapeError("attention_backward: dout " + shape_str(dout) + " vs output " +
                     shape_str(weights.rows(), v.cols()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  AttentionGrad g;
  g.dv = weights.transpose() * dout;
  const Tensor2 dweights = dout * v.transpose();
  const Tensor2 dscores = softmax_rows_backward(weights, dweights) * scale;
  g.dq = dscores * k;
  g.dk = dscores.transpose() * q;
  return g;
}

// ---------------------------------------------------------------- layer norm

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormOutput {
  Tensor2 y;
  Tensor2 xhat;     ///< normalized input before gain/bias
  Tensor2 inv_std;  ///< n x 1
};

/// Per-row standardization followed by gain and bias (both 1 x d).
inline LayerNormOutput layer_norm(const Tensor2& x, const Tensor2& gain, const Tensor2& bias) {
  const Eigen::Index d = x.cols();
  if (d < 2) throw ShapeError("layer_norm: feature dim must be >= 2, got " + shape_str(x));
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: x " + shape_str(x) + " with gain " + shape_str(gain) + " and bias " +
                     shape_str(bias));
  }
  LayerNormOutput o;
  o.xhat.resize(x.rows(), d);
  o.inv_std.resize(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const double var = centered.square().sum() / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    o.inv_std(r, 0) = inv;
    o.xhat.row(r) = centered * inv;
  }
  o.y = (o.xhat.array().rowwise() * gain.row(0).array()).matrix();
  o.y.rowwise() += bias.row(0);
  return o;
}

struct LayerNormGrad {
  Tensor2 dx;
  Tensor2 dgain;
  Tensor2 dbias;
};

inline LayerNormGrad layer_norm_backward(const LayerNormOutput& fwd, const Tensor2& gain, const Tensor2& dy) {
  const auto d = static_cast<double>(dy.cols());
  LayerNormGrad g;
  g.dgain = (dy.array() * fwd.xhat.array()).colwise().sum().matrix();
  g.dbias = dy.colwise().sum();
  const Tensor2 dxhat = (dy.array().rowwise() * gain.row(0).array()).matrix();
  g.dx.resize(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double sum = dxhat.row(r).sum();
    const double dot = dxhat.row(r).dot(fwd.xhat.row(r));
    g.dx.row(r) = (fwd.inv_std(r, 0) / d) *
                  (d * dxhat.row(r).array() - sum - fwd.xhat.row(r).array() * dot).matrix();
  }
  return g;
}

// ---------------------------------------------------------------- pointwise

namespace detail {

/// tanh(u) = 1 - 2 / (exp(2u) + 1), evaluated with the vectorized exp.
inline Eigen::ArrayXXd tanh_array(const Eigen::ArrayXXd& u) { return 1.0 - 2.0 / ((2.0 * u).exp() + 1.0); }

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace detail

/// tanh-approximated GELU.
inline Tensor2 gelu(const Tensor2& x) {
  const Eigen::ArrayXXd v = x.array();
  const Eigen::ArrayXXd t = detail::tanh_array(detail::kGeluC * (v + 0.044715 * v.cube()));
  return (0.5 * v * (1.0 + t)).matrix();
}

inline Tensor2 gelu_backward(const Tensor2& x, const Tensor2& dy) {
  const Eigen::ArrayXXd v = x.array();
  const Eigen::ArrayXXd t = detail::tanh_array(detail::kGeluC * (v + 0.044715 * v.cube()));
  const Eigen::ArrayXXd dt = (1.0 - t.square()) * detail::kGeluC * (1.0 + 3.0 * 0.044715 * v.square());
  return (dy.array() * (0.5 * (1.0 + t) + 0.5 * v * dt)).matrix();
}

inline Tensor2 sigmoid(const Tensor2& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

/// Backward of sigmoid given its output y.
inline Tensor2 sigmoid_backward(const Tensor2& y, const Tensor2& dy) {
  return (dy.array() * y.array() * (1.0 - y.array())).matrix();
}

}  // namespace insight
