#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "protoseg/autodiff.hpp"
#include "protoseg/nn_ops.hpp"
#include "test_support.hpp"

using namespace protoseg;
using namespace protoseg::testing;
using V = Var<double>;
using VList = std::vector<V>;

namespace {

// Direct 3x3 convolution, pad 1: the slow reference the im2col path must
// match.
Mat<double> conv3x3_reference(const Mat<double>& x, const Mat<double>& w,
                              int h, int wd, int stride) {
  const int cin = static_cast<int>(x.rows());
  const int cout = static_cast<int>(w.rows());
  const int oh = conv_out_extent(h, stride), ow = conv_out_extent(wd, stride);
  Mat<double> out = Mat<double>::Zero(cout, oh * ow);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy * stride + ky - 1;
            const int ix = ox * stride + kx - 1;
            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
            for (int ci = 0; ci < cin; ++ci)
              acc += w(co, ci * 9 + ky * 3 + kx) * x(ci, iy * wd + ix);
          }
        out(co, oy * ow + ox) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("elementwise and matmul values") {
  Tape<double> t;
  Mat<double> a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  V va = t.leaf(a, true), vb = t.leaf(b, true);
  CHECK((va + vb).value()(1, 1) == doctest::Approx(12.0));
  CHECK((va - vb).value()(0, 0) == doctest::Approx(-4.0));
  CHECK(cwise_mul(va, vb).value()(0, 1) == doctest::Approx(12.0));
  CHECK(matmul(va, vb).value()(0, 0) == doctest::Approx(19.0));
  CHECK(sum(va).value()(0, 0) == doctest::Approx(10.0));
}

TEST_CASE("gradient accumulates over reuse") {
  Tape<double> t;
  Mat<double> a(1, 1);
  a << 3.0;
  V x = t.leaf(a, true);
  V y = cwise_mul(x, x) + x;  // x^2 + x -> dy/dx = 2x + 1 = 7
  t.backward(y);
  CHECK(x.grad()(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("no-grad tape records no closures") {
  Tape<double> t(false);
  V x = t.leaf(Mat<double>::Ones(2, 2), true);
  V y = sum(gelu(x));
  CHECK(y.value()(0, 0) == doctest::Approx(2.0 * 0.8413447460685429 * 2.0));
  CHECK_FALSE(y.needs_grad());
}

TEST_CASE("primitive gradients match finite differences") {
  Rng rng(7);
  auto check = [&](const char* name, auto build,
                   std::vector<Mat<double>> inputs) {
    const double err = max_gradcheck_error(build, std::move(inputs));
    INFO(name);
    CHECK(err < 1e-6);
  };

  check("add/sub/scale",
        [](Tape<double>& t, const VList& in) {
          return sum(scale(in[0] + in[1] - in[2], 1.7));
        },
        {random_mat(3, 4, rng), random_mat(3, 4, rng), random_mat(3, 4, rng)});
  check("cwise_mul/div",
        [](Tape<double>& t, const VList& in) {
          return sum(cwise_div(cwise_mul(in[0], in[1]),
                               add_scalar(cwise_mul(in[2], in[2]), 0.5)));
        },
        {random_mat(3, 3, rng), random_mat(3, 3, rng), random_mat(3, 3, rng)});
  check("matmul/transpose",
        [](Tape<double>& t, const VList& in) {
          return sum(matmul(transpose(in[0]), in[1]));
        },
        {random_mat(3, 2, rng), random_mat(3, 4, rng)});
  check("broadcasts",
        [](Tape<double>& t, const VList& in) {
          return sum(scale_cols(add_col_broadcast(in[0], in[1]), in[2]));
        },
        {random_mat(3, 5, rng), random_mat(3, 1, rng), random_mat(1, 5, rng)});
  check("reductions/reshapes",
        [](Tape<double>& t, const VList& in) {
          V m = mean_cols(in[0]);
          V c = concat_rows(m, slice_rows(in[0], 1, 2));
          return sum(cwise_mul(tile_cols(c, 3), repeat_cols(in[1], 3)));
        },
        {random_mat(4, 6, rng), random_mat(6, 1, rng)});
  check("concat_cols",
        [](Tape<double>& t, const VList& in) {
          V c = concat_cols<double>({in[0], in[1], in[0]});
          return sum(cwise_mul(c, c));
        },
        {random_mat(3, 2, rng), random_mat(3, 3, rng)});
  check("nonlinearities",
        [](Tape<double>& t, const VList& in) {
          return sum(gelu(in[0])) + sum(sigmoid(in[1])) +
                 sum(vexp(scale(in[2], 0.3))) +
                 sum(vsqrt(add_scalar(cwise_mul(in[2], in[2]), 1.0)));
        },
        {random_mat(3, 3, rng), random_mat(3, 3, rng), random_mat(3, 3, rng)});
  check("softmax_cols",
        [](Tape<double>& t, const VList& in) {
          return sum(cwise_mul(softmax_cols(in[0]), in[1]));
        },
        {random_mat(5, 4, rng), random_mat(5, 4, rng)});
  check("channel_norm",
        [](Tape<double>& t, const VList& in) {
          return sum(cwise_mul(channel_norm(in[0]), in[1]));
        },
        {random_mat(6, 4, rng), random_mat(6, 4, rng)});
  check("upsample2x",
        [](Tape<double>& t, const VList& in) {
          return sum(cwise_mul(upsample2x_nearest(in[0], 2, 3, 2), in[1]));
        },
        {random_mat(3, 2 * 3 * 2, rng), random_mat(3, 4 * 6 * 2, rng)});
  check("conv3x3 stride 1",
        [](Tape<double>& t, const VList& in) {
          return sum(cwise_mul(conv3x3(in[0], in[1], 4, 5, 1), in[2]));
        },
        {random_mat(2, 20, rng), random_mat(3, 18, rng),
         random_mat(3, 20, rng)});
  check("conv3x3 stride 2 batched",
        [](Tape<double>& t, const VList& in) {
          return sum(cwise_mul(conv3x3(in[0], in[1], 4, 4, 2, 2), in[2]));
        },
        {random_mat(2, 32, rng), random_mat(3, 18, rng),
         random_mat(3, 8, rng)});
  check("clamp inside range",
        [](Tape<double>& t, const VList& in) {
          return sum(clamp(in[0], -10.0, 10.0));
        },
        {random_mat(3, 3, rng)});
}

TEST_CASE("conv3x3 matches the direct convolution") {
  Rng rng(11);
  for (int stride : {1, 2}) {
    const int h = 6, w = 4, cin = 3, cout = 5;
    Mat<double> x = random_mat(cin, h * w, rng);
    Mat<double> wgt = random_mat(cout, cin * 9, rng);
    Tape<double> t(false);
    Mat<double> got =
        conv3x3(t.constant(x), t.constant(wgt), h, w, stride).value();
    Mat<double> want = conv3x3_reference(x, wgt, h, w, stride);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv3x3 batched equals per-sample convolution") {
  Rng rng(13);
  const int h = 4, w = 4, cin = 2, cout = 3, batch = 3;
  Mat<double> wgt = random_mat(cout, cin * 9, rng);
  Mat<double> x(cin, h * w * batch);
  for (int b = 0; b < batch; ++b)
    x.middleCols(b * h * w, h * w) = random_mat(cin, h * w, rng);
  Tape<double> t(false);
  Mat<double> got =
      conv3x3(t.constant(x), t.constant(wgt), h, w, 2, batch).value();
  const int op = conv_out_extent(h, 2) * conv_out_extent(w, 2);
  for (int b = 0; b < batch; ++b) {
    Mat<double> one = conv3x3_reference(x.middleCols(b * h * w, h * w), wgt,
                                        h, w, 2);
    CHECK((got.middleCols(b * op, op) - one).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("upsample2x copies nearest source pixel") {
  Tape<double> t(false);
  Mat<double> x(1, 4);  // 2x2 grid
  x << 1, 2, 3, 4;
  Mat<double> up = upsample2x_nearest(t.constant(x), 2, 2).value();
  // Row-major 4x4: each source pixel becomes a 2x2 block.
  Mat<double> want(1, 16);
  want << 1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4;
  CHECK((up - want).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("channel_norm output has zero mean unit variance per column") {
  Rng rng(3);
  Tape<double> t(false);
  Mat<double> y = channel_norm(t.constant(random_mat(16, 5, rng))).value();
  for (int j = 0; j < y.cols(); ++j) {
    CHECK(std::abs(y.col(j).mean()) < 1e-10);
    CHECK(y.col(j).squaredNorm() / 16.0 == doctest::Approx(1.0).epsilon(1e-3));
  }
}
