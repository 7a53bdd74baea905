#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "protoseg/common.hpp"

namespace protoseg {

// Binary segmentation mask, entries exactly 0 or 1, stored row-major
// (index y*w + x).
struct BinaryMask {
  int h = 0;
  int w = 0;
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> data;

  static BinaryMask zeros(int h, int w) {
    BinaryMask m;
    m.h = h;
    m.w = w;
    m.data = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>::Zero(h * w);
    return m;
  }
  std::uint8_t& at(int y, int x) { return data[pixel_index(y, x, w)]; }
  std::uint8_t at(int y, int x) const { return data[pixel_index(y, x, w)]; }
  long foreground_count() const {
    return static_cast<long>(data.template cast<long>().sum());
  }
};

// RGB image in [0,1], channel-major: 3 x (h*w), column p = pixel p.
template <typename S>
struct Image {
  int h = 0;
  int w = 0;
  Mat<S> data;

  static Image zeros(int h, int w) {
    Image im;
    im.h = h;
    im.w = w;
    im.data = Mat<S>::Zero(3, h * w);
    return im;
  }
};

// Spatial grid of feature vectors: channels x (h*w).
template <typename S>
struct FeatureMap {
  int h = 0;
  int w = 0;
  Mat<S> data;

  int channels() const { return static_cast<int>(data.rows()); }
  Vec<S> at(int y, int x) const { return data.col(pixel_index(y, x, w)); }
};

// Per-pixel foreground probability in [0,1], length h*w.
template <typename S>
struct ProbMap {
  int h = 0;
  int w = 0;
  Vec<S> data;

  S at(int y, int x) const { return data[pixel_index(y, x, w)]; }
};

// Diagonal-covariance Gaussian. Variance is stored as log-variance so every
// component stays strictly positive under unconstrained updates.
template <typename S>
struct DiagonalGaussian {
  Vec<S> mean;
  Vec<S> log_var;

  DiagonalGaussian() = default;
  DiagonalGaussian(Vec<S> mu, Vec<S> lv)
      : mean(std::move(mu)), log_var(std::move(lv)) {
    require(mean.size() == log_var.size(),
            "DiagonalGaussian: mean and log-variance dimensions differ");
  }
  static DiagonalGaussian from_variance(Vec<S> mu, const Vec<S>& var) {
    require((var.array() > S(0)).all(),
            "DiagonalGaussian: variance must be strictly positive");
    return DiagonalGaussian(std::move(mu), var.array().log().matrix());
  }
  static DiagonalGaussian standard(int dim) {
    return DiagonalGaussian(Vec<S>::Zero(dim), Vec<S>::Zero(dim));
  }
  int dim() const { return static_cast<int>(mean.size()); }
  Vec<S> variance() const { return log_var.array().exp().matrix(); }
  Vec<S> stddev() const { return (log_var.array() * S(0.5)).exp().matrix(); }
};

// A reparameterized draw together with the noise that produced it:
// values = mean + noise .* sqrt(variance).
template <typename S>
struct LatentSample {
  Vec<S> values;
  Vec<S> noise;
};

// One annotated image of one class.
struct Sample {
  Image<float> image;
  BinaryMask mask;
  int class_id = -1;
};

// One few-shot task: k support pairs plus a query pair of the same class.
struct Episode {
  std::vector<Sample> support;
  Sample query;
  int class_id = -1;

  int k() const { return static_cast<int>(support.size()); }
};

}  // namespace protoseg
