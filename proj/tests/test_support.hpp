#pragma once

// Shared helpers for the test suites: deterministic random inputs and a
// central-difference gradient checker that is independent of the tape's
// backward pass.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "protoseg/autodiff.hpp"
#include "protoseg/types.hpp"

namespace protoseg::testing {

inline Mat<double> random_mat(int r, int c, Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Mat<double> m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = dist(rng);
  return m;
}

inline Vec<double> random_vec(int n, Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  return random_mat(n, 1, rng, lo, hi);
}

inline DiagonalGaussian<double> random_gaussian(int dim, Rng& rng,
                                                double mean_range = 2.0,
                                                double logvar_range = 1.0) {
  return DiagonalGaussian<double>(
      random_vec(dim, rng, -mean_range, mean_range),
      random_vec(dim, rng, -logvar_range, logvar_range));
}

inline BinaryMask random_mask(int h, int w, Rng& rng, double p_fg = 0.5) {
  std::bernoulli_distribution bit(p_fg);
  BinaryMask m = BinaryMask::zeros(h, w);
  for (int i = 0; i < h * w; ++i) m.data[i] = bit(rng) ? 1 : 0;
  return m;
}

// Relative error between an analytic gradient and its finite-difference
// estimate, with the both-zero case treated as agreement.
inline double gradient_rel_error(const Mat<double>& analytic,
                                 const Mat<double>& fd) {
  const double na = analytic.norm(), nf = fd.norm();
  const double denom = std::max(na, nf);
  if (denom < 1e-12) return 0.0;
  return (analytic - fd).norm() / denom;
}

// Central finite differences of a scalar function of one matrix input.
inline Mat<double> finite_difference(
    const std::function<double(const Mat<double>&)>& f, Mat<double> x,
    double step = 1e-4) {
  Mat<double> g(x.rows(), x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    for (int i = 0; i < x.rows(); ++i) {
      const double keep = x(i, j);
      x(i, j) = keep + step;
      const double hi = f(x);
      x(i, j) = keep - step;
      const double lo = f(x);
      x(i, j) = keep;
      g(i, j) = (hi - lo) / (2.0 * step);
    }
  }
  return g;
}

// Checks d(scalar build(leaves))/d(inputs[k]) for every k against central
// differences. The helper stages the inputs as leaves itself, so `build`
// only wires up the expression and returns the scalar output.
inline double max_gradcheck_error(
    const std::function<Var<double>(Tape<double>&,
                                    const std::vector<Var<double>>&)>& build,
    std::vector<Mat<double>> inputs, double step = 1e-4) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& m : inputs) leaves.push_back(tape.leaf(m, true));
  Var<double> out = build(tape, leaves);
  tape.backward(out);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto value_at = [&](const Mat<double>& xk) {
      Tape<double> t2(false);
      std::vector<Var<double>> l2;
      l2.reserve(inputs.size());
      for (std::size_t i = 0; i < inputs.size(); ++i)
        l2.push_back(t2.constant(i == k ? xk : inputs[i]));
      return build(t2, l2).value()(0, 0);
    };
    const Mat<double> fd = finite_difference(value_at, inputs[k], step);
    const Mat<double> analytic = leaves[k].grad();
    worst = std::max(worst, gradient_rel_error(analytic, fd));
  }
  return worst;
}

}  // namespace protoseg::testing
