#pragma once

// Differentiable numerical kernel: diagonal-Gaussian KL, reparameterized
// sampling, cosine similarity, attention maps, masked average pooling and the
// pixel-wise classification loss.
//
// Each operation comes in two forms: a plain one over Eigen values (used at
// inference time and by tests) and a tape form over Var handles (used by the
// training path). Property tests assert the two agree.

#include <cmath>
#include <utility>

#include "protoseg/autodiff.hpp"
#include "protoseg/types.hpp"

namespace protoseg {

inline constexpr double kCosineStabilizer = 1e-8;

template <typename S>
struct GaussianVar {
  Var<S> mean;
  Var<S> log_var;

  DiagonalGaussian<S> read() const {
    return DiagonalGaussian<S>(mean.value(), log_var.value());
  }
  int dim() const { return mean.rows(); }
};

template <typename S>
GaussianVar<S> stage(Tape<S>& t, const DiagonalGaussian<S>& g) {
  return {t.constant(g.mean), t.constant(g.log_var)};
}

// --- KL divergence ----------------------------------------------------------

// KL(q || p) for diagonal Gaussians:
//   1/2 sum_d [ log(var_p/var_q) + (var_q + (mu_q - mu_p)^2)/var_p - 1 ].
template <typename S>
S kl_diag_gauss(const DiagonalGaussian<S>& q, const DiagonalGaussian<S>& p) {
  require(q.dim() == p.dim(), "kl_diag_gauss: dimension mismatch");
  const auto dl = (p.log_var - q.log_var).array();
  const auto dm = (q.mean - p.mean).array();
  const S kl =
      S(0.5) * (dl + (-dl).exp() + dm.square() * (-p.log_var.array()).exp() -
                S(1))
                   .sum();
  return std::max(kl, S(0));
}

template <typename S>
Var<S> kl_diag_gauss(const GaussianVar<S>& q, const GaussianVar<S>& p) {
  require(q.dim() == p.dim(), "kl_diag_gauss: dimension mismatch");
  Var<S> dl = p.log_var - q.log_var;
  Var<S> dm = q.mean - p.mean;
  Var<S> ratio = vexp(scale(dl, S(-1)));
  Var<S> quad = cwise_mul(cwise_mul(dm, dm), vexp(scale(p.log_var, S(-1))));
  Var<S> terms = add_scalar(dl + ratio + quad, S(-1));
  return clamp(scale(sum(terms), S(0.5)), S(0),
               std::numeric_limits<S>::infinity());
}

// --- reparameterized sampling -----------------------------------------------

// values = mean + noise .* sqrt(variance); keeps the noise so the draw can be
// reproduced or differentiated.
template <typename S>
LatentSample<S> reparameterize(const DiagonalGaussian<S>& g,
                               const Vec<S>& noise) {
  require(noise.size() == g.mean.size(), "reparameterize: dimension mismatch");
  LatentSample<S> s;
  s.noise = noise;
  s.values = (g.mean.array() + noise.array() * g.stddev().array()).matrix();
  return s;
}

template <typename S>
LatentSample<S> sample(const DiagonalGaussian<S>& g, Rng& rng) {
  return reparameterize(g, standard_normal<S>(g.dim(), rng));
}

template <typename S>
Var<S> reparameterize(const GaussianVar<S>& g, const Vec<S>& noise) {
  require(noise.size() == g.mean.value().size(),
          "reparameterize: dimension mismatch");
  Tape<S>& t = g.mean.tape();
  Var<S> std = vexp(scale(g.log_var, S(0.5)));
  return g.mean + cwise_mul(t.constant(noise), std);
}

// --- cosine similarity and attention maps ------------------------------------

// a.b / (|a||b| + tau), clamped to [-1, 1]. The stabilizer makes zero vectors
// yield ~0 instead of dividing by zero.
template <typename S>
S cosine_similarity(const Vec<S>& a, const Vec<S>& b) {
  require(a.size() == b.size(), "cosine_similarity: dimension mismatch");
  const S sim = a.dot(b) / (a.norm() * b.norm() + S(kCosineStabilizer));
  return std::clamp(sim, S(-1), S(1));
}

// Cosine of every column of `features` (C x P) against `r` (C x 1) -> 1 x P.
template <typename S>
Var<S> cosine_cols(Var<S> features, Var<S> r) {
  Tape<S>& t = detail::same_tape(features, r);
  require(r.cols() == 1 && r.rows() == features.rows(),
          "cosine_cols: r must be C x 1");
  Var<S> num = matmul(transpose(r), features);  // 1 x P
  Var<S> fn = vsqrt(matmul(t.constant(Mat<S>::Ones(1, features.rows())),
                           cwise_mul(features, features)));  // 1 x P
  Var<S> rn = vsqrt(sum(cwise_mul(r, r)));                   // 1 x 1
  Var<S> denom = add_scalar(scale_cols(tile_cols(rn, features.cols()), fn),
                            S(kCosineStabilizer));
  return clamp(cwise_div(num, denom), S(-1), S(1));
}

// Attention map of Eq.-style cosine matching: entry (i,j) is
// sigmoid(cos(e_ij, r)).
template <typename S>
ProbMap<S> attention_map(const Vec<S>& r, const FeatureMap<S>& e) {
  require(static_cast<int>(r.size()) == e.channels(),
          "attention_map: latent dimension must equal feature channels");
  ProbMap<S> m;
  m.h = e.h;
  m.w = e.w;
  m.data.resize(e.data.cols());
  const S rn = r.norm();
  for (int j = 0; j < e.data.cols(); ++j) {
    const S sim = std::clamp(
        S(r.dot(e.data.col(j)) /
          (rn * e.data.col(j).norm() + S(kCosineStabilizer))),
        S(-1), S(1));
    m.data[j] = S(1) / (S(1) + std::exp(-sim));
  }
  return m;
}

template <typename S>
Var<S> attention_map(Var<S> r, Var<S> features) {
  return sigmoid(cosine_cols(features, r));
}

// --- masked average pooling ---------------------------------------------------

// Nearest-neighbor downsample of an image-resolution mask to (fh, fw).
inline BinaryMask downsample_mask_nearest(const BinaryMask& mask, int fh,
                                          int fw) {
  require(fh >= 1 && fw >= 1 && mask.h >= fh && mask.w >= fw,
          "downsample_mask_nearest: invalid target size");
  BinaryMask out = BinaryMask::zeros(fh, fw);
  const double sy = static_cast<double>(mask.h) / fh;
  const double sx = static_cast<double>(mask.w) / fw;
  for (int y = 0; y < fh; ++y) {
    const int iy = std::min(mask.h - 1, static_cast<int>((y + 0.5) * sy));
    for (int x = 0; x < fw; ++x) {
      const int ix = std::min(mask.w - 1, static_cast<int>((x + 0.5) * sx));
      out.at(y, x) = mask.at(iy, ix);
    }
  }
  return out;
}

// Normalized pooling weights at feature resolution. Falls back to a uniform
// (global average) weighting when the downsampled mask has no foreground.
template <typename S>
Vec<S> pooling_weights(const BinaryMask& mask, int fh, int fw) {
  const BinaryMask small = downsample_mask_nearest(mask, fh, fw);
  Vec<S> w = small.data.template cast<S>();
  const S total = w.sum();
  if (total > S(0)) return w / total;
  return Vec<S>::Constant(small.data.size(), S(1) / S(small.data.size()));
}

// Mean of feature vectors at mask-foreground positions (mask given at image
// resolution, reduced to the feature grid by nearest neighbor).
template <typename S>
Vec<S> masked_average_pool(const FeatureMap<S>& f, const BinaryMask& mask) {
  return f.data * pooling_weights<S>(mask, f.h, f.w);
}

template <typename S>
Var<S> masked_average_pool(Var<S> features, int fh, int fw,
                           const BinaryMask& mask) {
  Tape<S>& t = features.tape();
  require(features.cols() == static_cast<long>(fh) * fw,
          "masked_average_pool: feature column count does not match fh*fw");
  return matmul(features, t.constant(pooling_weights<S>(mask, fh, fw)));
}

// --- pixel-wise cross-entropy -------------------------------------------------

// Mean over pixels of -log softmax(logits)[target class]. Logits are
// 2 x (h*w); row 0 is background, row 1 foreground.
template <typename S>
S pixelwise_cross_entropy(const Mat<S>& logits, const BinaryMask& target) {
  require(logits.rows() == 2, "pixelwise_cross_entropy: logits must be 2 x P");
  require(logits.cols() == static_cast<long>(target.h) * target.w,
          "pixelwise_cross_entropy: spatial size mismatch");
  S total = S(0);
  for (int j = 0; j < logits.cols(); ++j) {
    const S m = std::max(logits(0, j), logits(1, j));
    const S lse = m + std::log(std::exp(logits(0, j) - m) +
                               std::exp(logits(1, j) - m));
    total += lse - logits(target.data[j] ? 1 : 0, j);
  }
  return total / S(logits.cols());
}

template <typename S>
Var<S> pixelwise_cross_entropy(Var<S> logits, const BinaryMask& target) {
  Tape<S>& t = logits.tape();
  require(logits.rows() == 2, "pixelwise_cross_entropy: logits must be 2 x P");
  require(logits.cols() == static_cast<long>(target.h) * target.w,
          "pixelwise_cross_entropy: spatial size mismatch");
  Mat<S> out(1, 1);
  out(0, 0) = pixelwise_cross_entropy(logits.value(), target);
  if (!t.grad_enabled() || !logits.needs_grad())
    return t.constant(std::move(out));
  const std::size_t il = logits.index();
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> tgt = target.data;
  return t.make(std::move(out), true,
                [il, tgt = std::move(tgt)](Tape<S>& t, const Mat<S>& g) {
                  const Mat<S>& l = t.value(il);
                  const S inv_p = S(1) / S(l.cols());
                  Mat<S> dl(2, l.cols());
                  for (int j = 0; j < l.cols(); ++j) {
                    const S m = std::max(l(0, j), l(1, j));
                    const S e0 = std::exp(l(0, j) - m);
                    const S e1 = std::exp(l(1, j) - m);
                    const S z = e0 + e1;
                    dl(0, j) = e0 / z - (tgt[j] ? S(0) : S(1));
                    dl(1, j) = e1 / z - (tgt[j] ? S(1) : S(0));
                  }
                  t.accumulate(il, dl * (g(0, 0) * inv_p));
                });
}

}  // namespace protoseg
