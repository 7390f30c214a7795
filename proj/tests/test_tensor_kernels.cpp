#include <gtest/gtest.h>
#include <omp.h>

#include <random>

#include "attnorm/gradcheck.hpp"
#include "attnorm/kernels.hpp"
#include "attnorm/layers.hpp"
#include "attnorm/reference.hpp"
#include "oracles.hpp"

using namespace attnorm;
using oracle::Tensor;

namespace {

struct ConvCase {
  Shape4 in;
  kernels::ConvGeometry g;
};

ConvCase random_conv_case(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> n(1, 3), c(1, 5), hw(3, 9), co(1, 6), k(1, 3), st(1, 2), pd(0, 2);
  ConvCase cc;
  cc.g.k = k(rng);
  cc.g.stride = st(rng);
  cc.g.pad = std::min<std::size_t>(pd(rng), cc.g.k);
  cc.g.c_out = co(rng);
  cc.in = Shape4{n(rng), c(rng), std::max(hw(rng), cc.g.k), std::max(hw(rng), cc.g.k)};
  cc.g.c_in = cc.in.c;
  return cc;
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor4<double>(Shape4{1, 2, 2, 2}, std::vector<double>(7)), DimensionError);
  EXPECT_THROW(Tensor4<double>(Shape4{0, 2, 2, 2}), DimensionError);
}

TEST(Tensor, IndexingIsNchw) {
  Tensor4<double> t(Shape4{2, 3, 4, 5});
  t(1, 2, 3, 4) = 9;
  EXPECT_EQ(t[t.size() - 1], 9);
  EXPECT_EQ(t.offset(1, 0, 0, 0), 60u);
}

TEST(Conv, IdentityKernel) {
  Tensor4<double> x(Shape4{1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const std::vector<double> w{1.0};
  const auto y = kernels::conv2d_forward<double>(x, w, {1, 1, 1, 1, 0});
  EXPECT_EQ(y.vec(), x.vec());
}

TEST(Conv, AllOnesCenterCountsOverlap) {
  Tensor4<double> x(Shape4{1, 1, 3, 3}, 1.0);
  const std::vector<double> w(9, 1.0);
  const auto y = kernels::conv2d_forward<double>(x, w, {1, 1, 3, 1, 1});
  EXPECT_EQ(y(0, 0, 1, 1), 9.0);
  EXPECT_EQ(y(0, 0, 0, 0), 4.0);
}

TEST(Conv, FixedCaseMatchesLoopOracle) {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, rng);
  const auto w = oracle::random_vec(4 * 3 * 9, rng);
  const auto y = kernels::conv2d_forward<double>(x, w, {4, 3, 3, 1, 1});
  EXPECT_LE(max_abs_diff(y, oracle::conv(x, w, 4, 3, 1, 1)), 1e-12);
}

TEST(Conv, RandomShapesMatchOracleForwardAndBackward) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 25; ++t) {
    const ConvCase cc = random_conv_case(rng);
    const Tensor x = oracle::random_tensor(cc.in, rng);
    const auto w = oracle::random_vec(cc.g.weight_numel(), rng);
    const Tensor want = oracle::conv(x, w, cc.g.c_out, cc.g.k, cc.g.stride, cc.g.pad);
    const Tensor got = kernels::conv2d_forward<double>(x, w, cc.g);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LE(max_abs_diff(got, want), 1e-10) << cc.in.str();
    EXPECT_LE(max_abs_diff(ref::conv2d_forward<double>(x, w, cc.g), want), 1e-10);

    const Tensor dy = oracle::random_tensor(want.shape(), rng);
    Tensor dx_want;
    std::vector<double> dw_want;
    oracle::conv_grads(x, w, cc.g.c_out, cc.g.k, cc.g.stride, cc.g.pad, dy, dx_want, dw_want);
    Tensor dx;
    std::vector<double> dw(w.size(), 0.0);
    kernels::conv2d_backward<double>(x, w, cc.g, dy, &dx, dw);
    EXPECT_LE(max_abs_diff(dx, dx_want), 1e-10);
    EXPECT_LE(oracle::max_abs(dw, dw_want), 1e-10);
  }
}

TEST(Conv, BackwardAccumulatesWeightGradient) {
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({2, 2, 4, 4}, rng);
  const kernels::ConvGeometry g{3, 2, 3, 1, 1};
  const auto w = oracle::random_vec(g.weight_numel(), rng);
  const Tensor dy = oracle::random_tensor(g.output_shape(x.shape()), rng);
  std::vector<double> once(w.size(), 0.0), twice(w.size(), 0.0);
  kernels::conv2d_backward<double>(x, w, g, dy, nullptr, once);
  kernels::conv2d_backward<double>(x, w, g, dy, nullptr, twice);
  kernels::conv2d_backward<double>(x, w, g, dy, nullptr, twice);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(twice[i], 2 * once[i], 1e-12);
}

TEST(Conv, ChannelMismatchIsDimensionError) {
  Tensor4<double> x(Shape4{1, 2, 4, 4});
  const std::vector<double> w(9 * 3);
  EXPECT_THROW(kernels::conv2d_forward<double>(x, w, {1, 3, 3, 1, 1}), DimensionError);
}

TEST(Pool, AverageExamples) {
  Tensor4<double> c(Shape4{1, 2, 3, 3}, 7.0);
  const auto yc = kernels::global_avg_pool(c);
  EXPECT_EQ(yc[0], 7.0);
  EXPECT_EQ(yc[1], 7.0);
  Tensor4<double> x(Shape4{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(kernels::global_avg_pool(x)[0], 2.5);
}

TEST(Pool, RandomShapesMatchOracle) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> n(1, 4), c(1, 6), hw(1, 9), k(1, 3), st(1, 2), pd(0, 1);
  for (int t = 0; t < 25; ++t) {
    const Shape4 s{n(rng), c(rng), hw(rng) + 2, hw(rng) + 2};
    const Tensor x = oracle::random_tensor(s, rng);
    const auto avg = kernels::global_avg_pool(x);
    const auto want = oracle::avg_pool(x);
    double err = 0;
    for (std::size_t i = 0; i < s.n; ++i)
      for (std::size_t j = 0; j < s.c; ++j) err = std::max(err, std::abs(avg(i, j, 0, 0) - want[i][j]));
    EXPECT_LE(err, 1e-12);
    EXPECT_LE(max_abs_diff(ref::global_avg_pool(x), avg), 1e-12);

    const std::size_t kk = k(rng), ss = st(rng), pp = std::min(pd(rng), kk / 2);
    std::vector<std::size_t> argmax;
    const auto mp = kernels::max_pool(x, kk, ss, pp, argmax);
    EXPECT_EQ(max_abs_diff(mp, oracle::max_pool(x, kk, ss, pp)), 0.0);
    EXPECT_EQ(max_abs_diff(ref::max_pool(x, kk, ss, pp), mp), 0.0);

    const Tensor dy = oracle::random_tensor(mp.shape(), rng);
    EXPECT_LE(max_abs_diff(kernels::max_pool_backward(dy, s, argmax), ref::max_pool_backward(x, kk, ss, pp, dy)),
              1e-12);
  }
}

TEST(FullyConnected, Examples) {
  Mat<double> v(1, 2);
  v << 3, 4;
  Mat<double> w(1, 2);
  w << 1, 1;
  const double b = 0;
  EXPECT_EQ(kernels::fully_connected<double>(v, w, &b)(0, 0), 7.0);
  const Mat<double> eye = Mat<double>::Identity(2, 2);
  EXPECT_EQ(kernels::fully_connected<double>(v, eye, nullptr), v);
}

TEST(FullyConnected, RandomShapesMatchOracle) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<std::size_t> d(1, 12);
  for (int t = 0; t < 25; ++t) {
    const std::size_t n = d(rng), din = d(rng), dout = d(rng);
    Mat<double> v(n, din), w(dout, din);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = std::uniform_real_distribution<double>(-1, 1)(rng);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std::uniform_real_distribution<double>(-1, 1)(rng);
    const auto b = oracle::random_vec(dout, rng);
    const auto want = oracle::fc(oracle::to_rows(v), oracle::to_rows(w), &b);
    EXPECT_LE(oracle::max_abs(oracle::to_rows(kernels::fully_connected<double>(v, w, b.data())), want), 1e-12);
    EXPECT_LE(oracle::max_abs(oracle::to_rows(ref::fully_connected<double>(v, w, b.data())), want), 1e-12);
  }
}

TEST(Relu, DerivativeAtZeroIsZero) {
  Tensor4<double> x(Shape4{1, 1, 1, 3}, std::vector<double>{-1, 0, 2});
  Tensor4<double> dy(Shape4{1, 1, 1, 3}, 1.0);
  const auto dx = kernels::relu_backward(x, dy);
  EXPECT_EQ(dx.vec(), (std::vector<double>{0, 0, 1}));
}

TEST(GradCheck, LinearOpIsNearlyExact) {
  std::mt19937_64 rng(1);
  Linear<double> fc(6, 4, true, 3);
  const Tensor x = oracle::random_tensor({3, 6, 1, 1}, rng);
  const auto rep = fd_check_module(fc, x, "fc");
  EXPECT_LE(rep.max_rel, 1e-9) << rep.str();
}

TEST(GradCheck, ReluAwayFromKink) {
  std::mt19937_64 rng(2);
  Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  for (auto& v : x.vec()) v = v < 0 ? v - 0.1 : v + 0.1;
  ReLU<double> r;
  const auto rep = fd_check_module(r, x, "relu");
  EXPECT_LE(rep.max_rel, 1e-6) << rep.str();
}

TEST(GradCheck, ChainRuleIsLinearInTheCotangent) {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, rng);
  std::vector<std::unique_ptr<Module<double>>> ops;
  ops.push_back(std::make_unique<Conv2d<double>>(3, 4, 3, 2, 1, 9));
  ops.push_back(std::make_unique<MaxPool2d<double>>(3, 2, 1));
  ops.push_back(std::make_unique<GlobalAvgPool<double>>());
  ops.push_back(std::make_unique<ReLU<double>>());
  for (auto& op : ops) {
    const Tensor y = op->forward(x);
    const Tensor g1 = oracle::random_tensor(y.shape(), rng);
    const Tensor g2 = oracle::random_tensor(y.shape(), rng);
    Tensor mix(y.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 0.7 * g1[i] - 1.3 * g2[i];
    const Tensor d1 = op->backward(g1);
    const Tensor d2 = op->backward(g2);
    const Tensor dm = op->backward(mix);
    double err = 0;
    for (std::size_t i = 0; i < dm.size(); ++i) err = std::max(err, std::abs(dm[i] - (0.7 * d1[i] - 1.3 * d2[i])));
    EXPECT_LE(err, 1e-10) << op->kind();
  }
}

TEST(Determinism, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(6);
  Tensor4<float> x(Shape4{4, 8, 9, 9});
  for (auto& v : x.vec()) v = std::uniform_real_distribution<float>(-1, 1)(rng);
  const kernels::ConvGeometry g{8, 8, 3, 1, 1};
  std::vector<float> w(g.weight_numel());
  for (auto& v : w) v = std::uniform_real_distribution<float>(-1, 1)(rng);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto y1 = kernels::conv2d_forward<float>(x, w, g);
  std::vector<float> dw1(w.size(), 0.f);
  kernels::conv2d_backward<float>(x, w, g, y1, nullptr, dw1);
  omp_set_num_threads(4);
  const auto y4 = kernels::conv2d_forward<float>(x, w, g);
  std::vector<float> dw4(w.size(), 0.f);
  kernels::conv2d_backward<float>(x, w, g, y4, nullptr, dw4);
  omp_set_num_threads(saved);
  EXPECT_EQ(y1.vec(), y4.vec());
  EXPECT_EQ(dw1, dw4);
}
