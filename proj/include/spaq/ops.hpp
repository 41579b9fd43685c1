#pragma once

#include <Eigen/Core>

#include <cmath>

#include "spaq/graph.hpp"
#include "spaq/tensor.hpp"

namespace spaq::ops {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Unfolds sample `n` of an NCHW tensor into a (Cin*Kh*Kw) x (Hout*Wout)
/// patch matrix. Out-of-bounds taps read as zero.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, Index n, const ConvAttrs& a, Index out_h, Index out_w,
            RowMatrix<Scalar>& cols) {
  const Index c_in = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  cols.resize(c_in * a.kernel_h * a.kernel_w, out_h * out_w);
  const Scalar* src = x.data() + n * c_in * in_h * in_w;
  Index row = 0;
  for (Index c = 0; c < c_in; ++c) {
    const Scalar* plane = src + c * in_h * in_w;
    for (Index ky = 0; ky < a.kernel_h; ++ky) {
      for (Index kx = 0; kx < a.kernel_w; ++kx, ++row) {
        Scalar* dst = cols.row(row).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * a.stride - a.padding + ky;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * a.stride - a.padding + kx;
            dst[oy * out_w + ox] =
                (iy >= 0 && iy < in_h && ix >= 0 && ix < in_w) ? plane[iy * in_w + ix] : Scalar(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters patch gradients back into sample `n` of dx.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvAttrs& a, Index out_h, Index out_w,
            Tensor<Scalar>& dx, Index n) {
  const Index c_in = dx.dim(1), in_h = dx.dim(2), in_w = dx.dim(3);
  Scalar* dst = dx.data() + n * c_in * in_h * in_w;
  Index row = 0;
  for (Index c = 0; c < c_in; ++c) {
    Scalar* plane = dst + c * in_h * in_w;
    for (Index ky = 0; ky < a.kernel_h; ++ky) {
      for (Index kx = 0; kx < a.kernel_w; ++kx, ++row) {
        const Scalar* src = cols.row(row).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * a.stride - a.padding + ky;
          if (iy < 0 || iy >= in_h) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * a.stride - a.padding + kx;
            if (ix >= 0 && ix < in_w) plane[iy * in_w + ix] += src[oy * out_w + ox];
          }
        }
      }
    }
  }
}

/// 2-D cross-correlation (no kernel flip), NCHW.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>* bias, const ConvAttrs& a) {
  if (x.rank() != 4 || x.dim(1) != a.in_channels) {
    fail(ErrorCode::kShapeMismatch, "conv2d: input " + shape_string(x.shape()) + " vs " +
                                        std::to_string(a.in_channels) + " input channels");
  }
  const Index out_h = conv_output_extent(x.dim(2), a.kernel_h, a.stride, a.padding);
  const Index out_w = conv_output_extent(x.dim(3), a.kernel_w, a.stride, a.padding);
  const Index batch = x.dim(0), k = a.in_channels * a.kernel_h * a.kernel_w;
  Tensor<Scalar> y({batch, a.out_channels, out_h, out_w});
  const auto w = weight.matrix(a.out_channels, k);
  RowMatrix<Scalar> cols;
  for (Index n = 0; n < batch; ++n) {
    im2col(x, n, a, out_h, out_w, cols);
    Eigen::Map<RowMatrix<Scalar>> out(y.data() + n * a.out_channels * out_h * out_w,
                                      a.out_channels, out_h * out_w);
    out.noalias() = w * cols;
    if (bias) out.colwise() += bias->vec();
  }
  return y;
}

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> dx;
  Tensor<Scalar> dweight;
  Tensor<Scalar> dbias;
};

template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                                  const ConvAttrs& a, const Tensor<Scalar>& dy) {
  const Index batch = x.dim(0), out_h = dy.dim(2), out_w = dy.dim(3);
  const Index k = a.in_channels * a.kernel_h * a.kernel_w;
  ConvGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>(weight.shape()),
                      Tensor<Scalar>({a.out_channels})};
  const auto w = weight.matrix(a.out_channels, k);
  auto dw = g.dweight.matrix(a.out_channels, k);
  RowMatrix<Scalar> cols, dcols;
  for (Index n = 0; n < batch; ++n) {
    Eigen::Map<const RowMatrix<Scalar>> d(dy.data() + n * a.out_channels * out_h * out_w,
                                          a.out_channels, out_h * out_w);
    im2col(x, n, a, out_h, out_w, cols);
    dw.noalias() += d * cols.transpose();
    g.dbias.vec() += d.rowwise().sum();
    dcols.noalias() = w.transpose() * d;
    col2im(dcols, a, out_h, out_w, g.dx, n);
  }
  return g;
}

/// Per-sample, per-channel normalization over H x W.
template <typename Scalar>
Tensor<Scalar> instance_norm(const Tensor<Scalar>& x, const Tensor<Scalar>* gamma,
                             const Tensor<Scalar>* beta) {
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> y(x.shape());
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * plane;
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> v(x.data() + off, plane);
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> out(y.data() + off, plane);
      const Scalar mean = v.mean();
      const Scalar var = (v.array() - mean).square().mean();
      const Scalar inv_std = Scalar(1) / std::sqrt(var + Scalar(kInstanceNormEpsilon));
      const Scalar g = gamma ? (*gamma)[c] : Scalar(1);
      const Scalar b = beta ? (*beta)[c] : Scalar(0);
      out = ((v.array() - mean) * (inv_std * g) + b).matrix();
    }
  }
  return y;
}

template <typename Scalar>
struct NormGrads {
  Tensor<Scalar> dx;
  Tensor<Scalar> dgamma;
  Tensor<Scalar> dbeta;
};

template <typename Scalar>
NormGrads<Scalar> instance_norm_backward(const Tensor<Scalar>& x, const Tensor<Scalar>* gamma,
                                         const Tensor<Scalar>& dy) {
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  NormGrads<Scalar> g{Tensor<Scalar>(x.shape()), Tensor<Scalar>({channels}),
                      Tensor<Scalar>({channels})};
  using Vec = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * plane;
      Eigen::Map<const Vec> v(x.data() + off, plane);
      Eigen::Map<const Vec> d(dy.data() + off, plane);
      Eigen::Map<Vec> dx(g.dx.data() + off, plane);
      const Scalar mean = v.mean();
      const Scalar var = (v - mean).square().mean();
      const Scalar inv_std = Scalar(1) / std::sqrt(var + Scalar(kInstanceNormEpsilon));
      const Vec xhat = (v - mean) * inv_std;
      g.dgamma[c] += (d * xhat).sum();
      g.dbeta[c] += d.sum();
      const Scalar gm = gamma ? (*gamma)[c] : Scalar(1);
      const Vec dxhat = d * gm;
      dx = inv_std * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean());
    }
  }
  return g;
}

template <typename Scalar>
Scalar sigmoid(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.vec().cwiseMax(Scalar(0)).eval());
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.vec().unaryExpr([](Scalar v) { return sigmoid(v); }).eval());
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.vec().array().tanh().matrix().eval());
}

}  // namespace spaq::ops
