#pragma once

// Spatial network ops on channel-major feature matrices (C x h*w), built on
// the autodiff tape. A `batch` argument means the columns hold `batch`
// consecutive h*w blocks sharing the same spatial layout; convolution and
// resampling never mix pixels across blocks.

#include <utility>

#include "protoseg/autodiff.hpp"

namespace protoseg {

inline int conv_out_extent(int in, int stride) {
  // 3x3 kernel, padding 1.
  return (in - 1) / stride + 1;
}

namespace detail {

// Gathers 3x3 neighborhoods into a (C*9) x (out_h*out_w*batch) patch matrix.
// Patch row index is c*9 + ky*3 + kx; out-of-bounds taps are zero.
template <typename S>
Mat<S> im2col3x3(const Mat<S>& x, int h, int w, int stride, int batch) {
  const int c = static_cast<int>(x.rows());
  const int oh = conv_out_extent(h, stride);
  const int ow = conv_out_extent(w, stride);
  Mat<S> patches = Mat<S>::Zero(c * 9, static_cast<long>(oh) * ow * batch);
  for (int b = 0; b < batch; ++b) {
    const long in_base = static_cast<long>(b) * h * w;
    const long out_base = static_cast<long>(b) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            const long pcol = out_base + oy * ow + ox;
            const long icol = in_base + iy * w + ix;
            for (int ch = 0; ch < c; ++ch)
              patches(ch * 9 + ky * 3 + kx, pcol) = x(ch, icol);
          }
        }
      }
    }
  }
  return patches;
}

// Scatter-add transpose of im2col3x3.
template <typename S>
void col2im3x3(const Mat<S>& dpatches, int c, int h, int w, int stride,
               int batch, Mat<S>& dx) {
  const int oh = conv_out_extent(h, stride);
  const int ow = conv_out_extent(w, stride);
  for (int b = 0; b < batch; ++b) {
    const long in_base = static_cast<long>(b) * h * w;
    const long out_base = static_cast<long>(b) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            const long pcol = out_base + oy * ow + ox;
            const long icol = in_base + iy * w + ix;
            for (int ch = 0; ch < c; ++ch)
              dx(ch, icol) += dpatches(ch * 9 + ky * 3 + kx, pcol);
          }
        }
      }
    }
  }
}

}  // namespace detail

// 3x3 convolution, padding 1. `weights` is C_out x (C_in*9) with the same
// inner ordering as im2col3x3. Bias is applied separately.
template <typename S>
Var<S> conv3x3(Var<S> x, Var<S> weights, int h, int w, int stride,
               int batch = 1) {
  Tape<S>& t = detail::same_tape(x, weights);
  const int cin = x.rows();
  require(x.cols() == static_cast<long>(h) * w * batch,
          "conv3x3: input column count does not match h*w*batch");
  require(weights.cols() == cin * 9,
          "conv3x3: weight columns must equal C_in*9");
  require(stride == 1 || stride == 2, "conv3x3: stride must be 1 or 2");
  Mat<S> patches = detail::im2col3x3(x.value(), h, w, stride, batch);
  Mat<S> out = weights.value() * patches;
  const bool ng = x.needs_grad() || weights.needs_grad();
  if (!t.grad_enabled() || !ng) return t.constant(std::move(out));
  const std::size_t ix = x.index(), iw = weights.index();
  return t.make(
      std::move(out), true,
      [ix, iw, patches = std::move(patches), cin, h, w, stride,
       batch](Tape<S>& t, const Mat<S>& g) {
        t.accumulate(iw, g * patches.transpose());
        if (t.needs_grad(ix)) {
          Mat<S> dpatches = t.value(iw).transpose() * g;
          Mat<S> dx = Mat<S>::Zero(cin, static_cast<long>(h) * w * batch);
          detail::col2im3x3(dpatches, cin, h, w, stride, batch, dx);
          t.accumulate(ix, dx);
        }
      });
}

// Nearest-neighbor 2x upsampling: output pixel (y, x) copies input
// (y/2, x/2).
template <typename S>
Var<S> upsample2x_nearest(Var<S> x, int h, int w, int batch = 1) {
  Tape<S>& t = x.tape();
  require(x.cols() == static_cast<long>(h) * w * batch,
          "upsample2x_nearest: input column count does not match h*w*batch");
  const int oh = 2 * h, ow = 2 * w;
  Mat<S> out(x.rows(), static_cast<long>(oh) * ow * batch);
  for (int b = 0; b < batch; ++b) {
    const long in_base = static_cast<long>(b) * h * w;
    const long out_base = static_cast<long>(b) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        out.col(out_base + y * ow + xx) =
            x.value().col(in_base + (y / 2) * w + xx / 2);
  }
  if (!t.grad_enabled() || !x.needs_grad()) return t.constant(std::move(out));
  const std::size_t ix = x.index();
  return t.make(std::move(out), true,
                [ix, h, w, batch](Tape<S>& t, const Mat<S>& g) {
                  const int oh = 2 * h, ow = 2 * w;
                  Mat<S> dx =
                      Mat<S>::Zero(g.rows(), static_cast<long>(h) * w * batch);
                  for (int b = 0; b < batch; ++b) {
                    const long in_base = static_cast<long>(b) * h * w;
                    const long out_base = static_cast<long>(b) * oh * ow;
                    for (int y = 0; y < oh; ++y)
                      for (int xx = 0; xx < ow; ++xx)
                        dx.col(in_base + (y / 2) * w + xx / 2) +=
                            g.col(out_base + y * ow + xx);
                  }
                  t.accumulate(ix, dx);
                });
}

// Parameter-free normalization: each column (pixel) is normalized to zero
// mean, unit variance across its channels. No learned scale/shift and no
// running statistics, so train and eval behave identically.
template <typename S>
Var<S> channel_norm(Var<S> x, S eps = S(1e-5)) {
  Tape<S>& t = x.tape();
  const int r = x.rows();
  const S inv_r = S(1) / S(r);
  Mat<S> out(x.rows(), x.cols());
  Vec<S> inv_std(x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    const S mu = x.value().col(j).mean();
    const S var = (x.value().col(j).array() - mu).square().sum() * inv_r;
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[j] = is;
    out.col(j) = (x.value().col(j).array() - mu) * is;
  }
  if (!t.grad_enabled() || !x.needs_grad()) return t.constant(std::move(out));
  const std::size_t ix = x.index();
  const std::size_t io = t.size();
  return t.make(std::move(out), true,
                [ix, io, inv_std = std::move(inv_std), inv_r](
                    Tape<S>& t, const Mat<S>& g) {
                  const Mat<S>& y = t.value(io);
                  Mat<S> dx(g.rows(), g.cols());
                  for (int j = 0; j < g.cols(); ++j) {
                    const S gm = g.col(j).mean();
                    const S gy = g.col(j).dot(y.col(j)) * inv_r;
                    dx.col(j) = inv_std[j] * (g.col(j).array() - gm -
                                              y.col(j).array() * gy);
                  }
                  t.accumulate(ix, dx);
                });
}

}  // namespace protoseg
