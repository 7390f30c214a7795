#include <gtest/gtest.h>

#include <random>

#include "attnorm/attention.hpp"
#include "attnorm/gradcheck.hpp"
#include "attnorm/normalization.hpp"
#include "oracles.hpp"

using namespace attnorm;
using oracle::Matrix;
using oracle::Tensor;

namespace {

Matrix rows_of(const std::vector<double>& flat, std::size_t rows, std::size_t cols) {
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = flat[i * cols + j];
  return m;
}

int summary_code(Summarizer::Kind k) {
  switch (k) {
    case Summarizer::Kind::kMean: return 0;
    case Summarizer::Kind::kMeanStd: return 1;
    case Summarizer::Kind::kRSD: return 2;
  }
  return -1;
}

int act_code(Activation a) {
  switch (a) {
    case Activation::kReLU: return 0;
    case Activation::kSigmoid: return 1;
    case Activation::kSoftmax: return 2;
    case Activation::kHSigmoid: return 3;
  }
  return -1;
}

// Runs the naive pipeline with the parameters currently held by `net`.
Matrix oracle_lambda(AttentionNet<double>& net, const Tensor& x) {
  const AttentionConfig& cfg = net.config();
  const Matrix w = rows_of(net.fc_weight().value, net.input_width(), net.k());
  if (net.has_bn()) {
    return oracle::attention_weights(x, summary_code(cfg.summarizer.kind), cfg.summarizer.eps, w, nullptr, true,
                                     net.bn_gamma()->value, net.bn_beta()->value, net.bn_standardizer()->eps(),
                                     act_code(cfg.activation));
  }
  return oracle::attention_weights(x, summary_code(cfg.summarizer.kind), cfg.summarizer.eps, w,
                                   &net.fc_bias()->value, false, {}, {}, 0.0, act_code(cfg.activation));
}

}  // namespace

TEST(HSigmoid, Examples) {
  EXPECT_EQ(hsigmoid(-3.0), 0.0);
  EXPECT_EQ(hsigmoid(0.0), 0.5);
  EXPECT_EQ(hsigmoid(3.0), 1.0);
  EXPECT_EQ(hsigmoid(-10.0), 0.0);
  EXPECT_EQ(hsigmoid(10.0), 1.0);
  EXPECT_EQ(hsigmoid_grad(-3.0), 0.0);
  EXPECT_EQ(hsigmoid_grad(3.0), 0.0);
  EXPECT_EQ(hsigmoid_grad(0.0), 1.0 / 6.0);
}

TEST(HSigmoid, MonotoneLipschitzAndBoundedOnRandomPairs) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  std::size_t bad_range = 0, bad_mono = 0, bad_lip = 0;
  for (int i = 0; i < 1000000; ++i) {
    const double a = u(rng);
    const double b = u(rng);
    const double ha = hsigmoid(a);
    const double hb = hsigmoid(b);
    if (ha < 0.0 || ha > 1.0) ++bad_range;
    if ((a <= b) != (ha <= hb) && ha != hb) ++bad_mono;
    if (std::abs(ha - hb) > std::abs(a - b) / 6.0 + 1e-15) ++bad_lip;
  }
  EXPECT_EQ(bad_range, 0u);
  EXPECT_EQ(bad_mono, 0u);
  EXPECT_EQ(bad_lip, 0u);
}

TEST(Summary, ConstantChannel) {
  Tensor4<double> x(Shape4{1, 1, 3, 3}, 2.5);
  Summarizer mean{Summarizer::Kind::kMean, 1e-5};
  Summarizer rsd{Summarizer::Kind::kRSD, 1e-5};
  EXPECT_DOUBLE_EQ(channel_summary(x, mean)(0, 0), 2.5);
  const double r = channel_summary(x, rsd)(0, 0);
  EXPECT_TRUE(std::isfinite(r));
  EXPECT_NEAR(r, 2.5 / 1e-5, 1e-6);
}

TEST(Summary, TwoValuedChannel) {
  Tensor4<double> x(Shape4{1, 1, 2, 2}, std::vector<double>{1, 3, 1, 3});
  const double eps = 1e-5;
  const double r = channel_summary(x, Summarizer{Summarizer::Kind::kRSD, eps})(0, 0);
  EXPECT_NEAR(r, 2.0 / (1.0 + eps), 1e-14);
  EXPECT_NEAR(r, oracle::summary(x, 2, eps)[0][0], 1e-14);
}

TEST(Summary, MeanStdWidth) {
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor(Shape4{3, 8, 4, 4}, rng);
  const Mat<double> s = channel_summary(x, Summarizer{Summarizer::Kind::kMeanStd, 1e-5});
  EXPECT_EQ(s.rows(), 3);
  EXPECT_EQ(s.cols(), 16);
}

TEST(Summary, RandomShapesMatchOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  for (int trial = 0; trial < 24; ++trial) {
    const Shape4 s{dim(rng), dim(rng), dim(rng), dim(rng)};
    const Tensor x = oracle::random_tensor(s, rng, -2.0, 3.0);
    for (auto kind : {Summarizer::Kind::kMean, Summarizer::Kind::kMeanStd, Summarizer::Kind::kRSD}) {
      const Mat<double> got = channel_summary(x, Summarizer{kind, 1e-3});
      const Matrix want = oracle::summary(x, summary_code(kind), 1e-3);
      EXPECT_LE(oracle::max_abs(oracle::to_rows(got), want), 1e-10) << s.str() << " kind " << to_string(kind);
    }
  }
}

TEST(Summary, RSDScaleCovariance) {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor(Shape4{2, 5, 4, 4}, rng, 0.5, 2.0);
  const double a = 3.7;
  Tensor ax = x;
  for (auto& v : ax.vec()) v *= a;
  const double eps = 1e-3;
  const Mat<double> got = channel_summary(ax, Summarizer{Summarizer::Kind::kRSD, eps});
  const Matrix mu = oracle::summary(x, 0, 0.0);
  const Matrix ms = oracle::summary(x, 1, 0.0);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 5; ++c) {
      const double want = a * mu[n][c] / (a * ms[n][5 + c] + eps);
      EXPECT_NEAR(got(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)), want, 1e-10);
    }

  const Summarizer tiny{Summarizer::Kind::kRSD, 1e-12};
  const Mat<double> r1 = channel_summary(x, tiny);
  const Mat<double> r2 = channel_summary(ax, tiny);
  EXPECT_LE((r1 - r2).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Activations, SoftmaxRowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(5);
  Mat<double> z(6, 7);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = u(rng);
  const Mat<double> p = activate(z, Activation::kSoftmax);
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  Mat<double> shifted = z;
  for (Eigen::Index r = 0; r < z.rows(); ++r) shifted.row(r).array() += 100.0 * static_cast<double>(r + 1);
  EXPECT_LE((activate(shifted, Activation::kSoftmax) - p).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Activations, MatchOracle) {
  std::mt19937_64 rng(6);
  Mat<double> z(5, 4);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = u(rng);
  for (auto a : {Activation::kReLU, Activation::kSigmoid, Activation::kSoftmax, Activation::kHSigmoid}) {
    EXPECT_LE(oracle::max_abs(oracle::to_rows(activate(z, a)), oracle::activate(oracle::to_rows(z), act_code(a))),
              1e-14)
        << to_string(a);
  }
}

TEST(SqueezeExcite, ZeroExciteHalvesInput) {
  std::mt19937_64 rng(7);
  const Tensor x = oracle::random_tensor(Shape4{2, 8, 3, 3}, rng);
  SqueezeExcite<double> se(8, 2, 1);
  std::fill(se.excite_weight().value.begin(), se.excite_weight().value.end(), 0.0);
  std::fill(se.excite_bias().value.begin(), se.excite_bias().value.end(), 0.0);
  const Tensor y = se.forward(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.5 * x[i]);
}

TEST(SqueezeExcite, ScalarDecomposition) {
  const double lambda = 0.5, gamma = 2.0, beta = 1.0, xhat = 3.0;
  EXPECT_DOUBLE_EQ(lambda * (gamma * xhat + beta), 3.5);
  EXPECT_DOUBLE_EQ((lambda * gamma) * xhat + lambda * beta, 3.5);
}

TEST(SqueezeExcite, HiddenWidth) {
  EXPECT_EQ(se_hidden_width(64, 16), 4u);
  EXPECT_EQ(se_hidden_width(8, 8), 1u);
  EXPECT_THROW(se_hidden_width(8, 16), ConfigError);
  EXPECT_THROW(se_hidden_width(8, 0), ConfigError);
}

TEST(SqueezeExcite, MatchesOracle) {
  std::mt19937_64 rng(8);
  const Tensor x = oracle::random_tensor(Shape4{2, 16, 4, 4}, rng);
  SqueezeExcite<double> se(16, se_hidden_width(16, 4), 3);
  for (Param<double>* p : {&se.squeeze_bias(), &se.excite_bias()}) p->value = oracle::random_vec(p->numel(), rng);
  const Matrix ws = rows_of(se.squeeze_weight().value, 4, 16);
  const Matrix we = rows_of(se.excite_weight().value, 16, 4);
  const Tensor want = oracle::se(x, ws, se.squeeze_bias().value, we, se.excite_bias().value);
  EXPECT_LE(oracle::max_abs(se.forward(x).vec(), want.vec()), 1e-12);
}

TEST(SqueezeExcite, AffineDecomposition) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Shape4 s{3, 12, 3, 5};
    const Tensor xhat = oracle::random_tensor(s, rng, -2.0, 2.0);
    const AffineParams<double> ab{oracle::random_vec(12, rng, 0.5, 1.5), oracle::random_vec(12, rng)};
    SqueezeExcite<double> se(12, 3, 100 + static_cast<std::uint64_t>(trial));
    se.excite_bias().value = oracle::random_vec(12, rng);
    const Tensor y = se.forward(affine(xhat, ab));
    const Mat<double>& g = se.gate();
    double worst = 0;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t h = 0; h < s.h; ++h)
          for (std::size_t w = 0; w < s.w; ++w) {
            const double lam = g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c));
            const double z = (lam * ab.gamma[c]) * xhat(n, c, h, w) + lam * ab.beta[c];
            worst = std::max(worst, std::abs(z - y(n, c, h, w)));
          }
    EXPECT_LE(worst, 1e-10);
  }
}

TEST(SqueezeExcite, FiniteDifferences) {
  std::mt19937_64 rng(10);
  const Tensor x = oracle::random_tensor(Shape4{2, 8, 3, 3}, rng);
  SqueezeExcite<double> se(8, 2, 4);
  const FdReport r = fd_check_module(se, x, "se");
  EXPECT_TRUE(r.passed()) << r.str();
}

TEST(AttentionNet, ZeroWeightsHSigmoidGiveHalf) {
  std::mt19937_64 rng(12);
  AttentionConfig cfg;
  cfg.choice = AttentionChoice::kChoice1;
  cfg.activation = Activation::kHSigmoid;
  AttentionNet<double> net(6, 4, cfg, 1);
  std::fill(net.fc_weight().value.begin(), net.fc_weight().value.end(), 0.0);
  const Mat<double> lam = net.forward(oracle::random_tensor(Shape4{3, 6, 4, 4}, rng), Mode::kTrain);
  ASSERT_EQ(lam.rows(), 3);
  ASSERT_EQ(lam.cols(), 4);
  for (Eigen::Index i = 0; i < lam.size(); ++i) EXPECT_EQ(lam.data()[i], 0.5);
}

TEST(AttentionNet, ZeroWeightsSoftmaxAreUniform) {
  std::mt19937_64 rng(13);
  AttentionConfig cfg;
  cfg.choice = AttentionChoice::kChoice1;
  cfg.activation = Activation::kSoftmax;
  AttentionNet<double> net(6, 3, cfg, 1);
  std::fill(net.fc_weight().value.begin(), net.fc_weight().value.end(), 0.0);
  const Mat<double> lam = net.forward(oracle::random_tensor(Shape4{2, 6, 4, 4}, rng), Mode::kTrain);
  for (Eigen::Index i = 0; i < lam.size(); ++i) EXPECT_NEAR(lam.data()[i], 1.0 / 3.0, 1e-15);
}

TEST(AttentionNet, Choice2MatchesOracleAndCentersPreactivation) {
  std::mt19937_64 rng(14);
  AttentionConfig cfg;
  cfg.choice = AttentionChoice::kChoice2;
  cfg.activation = Activation::kHSigmoid;
  AttentionNet<double> net(8, 4, cfg, 2);
  net.bn_gamma()->value = oracle::random_vec(4, rng, 0.5, 1.5);
  net.bn_beta()->value = oracle::random_vec(4, rng, -0.5, 0.5);
  const Tensor x = oracle::random_tensor(Shape4{5, 8, 3, 3}, rng, -1.0, 2.0);
  const Mat<double> lam = net.forward(x, Mode::kTrain);
  EXPECT_LE(oracle::max_abs(oracle::to_rows(lam), oracle_lambda(net, x)), 1e-10);

  // Pre-activation minus the BN shift has zero batch mean per component.
  const Mat<double>& z = net.preactivation();
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    EXPECT_LE(std::abs(z.col(k).mean() - net.bn_beta()->value[static_cast<std::size_t>(k)]), 1e-10);
  }
}

TEST(AttentionNet, Choice2EvalNeedsRunningStats) {
  std::mt19937_64 rng(15);
  AttentionNet<double> net(4, 3, AttentionConfig{}, 1);
  const Tensor x = oracle::random_tensor(Shape4{2, 4, 3, 3}, rng);
  EXPECT_THROW(net.forward(x, Mode::kEval), StateError);
  net.forward(x, Mode::kTrain);
  EXPECT_NO_THROW(net.forward(x, Mode::kEval));
}

TEST(AttentionNet, RandomConfigurationsMatchOracle) {
  std::mt19937_64 rng(16);
  std::uniform_int_distribution<std::size_t> dim(2, 6);
  std::uniform_int_distribution<int> pick(0, 11);
  const Summarizer::Kind kinds[] = {Summarizer::Kind::kMean, Summarizer::Kind::kMeanStd, Summarizer::Kind::kRSD};
  const Activation acts[] = {Activation::kReLU, Activation::kSigmoid, Activation::kSoftmax, Activation::kHSigmoid};
  for (int trial = 0; trial < 24; ++trial) {
    const int code = pick(rng);
    AttentionConfig cfg;
    cfg.summarizer = Summarizer{kinds[code % 3], 1e-3};
    cfg.activation = acts[code % 4];
    cfg.choice = trial % 2 == 0 ? AttentionChoice::kChoice1 : AttentionChoice::kChoice2;
    const Shape4 s{dim(rng), dim(rng), dim(rng), dim(rng)};
    const std::size_t k = dim(rng);
    AttentionNet<double> net(s.c, k, cfg, static_cast<std::uint64_t>(trial));
    if (net.fc_bias() != nullptr) net.fc_bias()->value = oracle::random_vec(k, rng);
    const Tensor x = oracle::random_tensor(s, rng, -1.0, 2.0);
    const Mat<double> lam = net.forward(x, Mode::kTrain);
    EXPECT_LE(oracle::max_abs(oracle::to_rows(lam), oracle_lambda(net, x)), 1e-10)
        << s.str() << " K=" << k << " " << to_string(cfg.summarizer.kind) << "/" << to_string(cfg.activation) << "/"
        << to_string(cfg.choice);
  }
}

TEST(AttentionNet, FiniteDifferences) {
  std::mt19937_64 rng(17);
  for (auto choice : {AttentionChoice::kChoice1, AttentionChoice::kChoice2}) {
    for (auto act : {Activation::kReLU, Activation::kSigmoid, Activation::kSoftmax, Activation::kHSigmoid}) {
      AttentionConfig cfg;
      cfg.choice = choice;
      cfg.activation = act;
      AttentionNet<double> net(5, 3, cfg, 9);
      // Small fc weights keep hsigmoid and relu inputs away from their kinks.
      for (auto& w : net.fc_weight().value) w *= 0.05;
      if (net.fc_bias() != nullptr) net.fc_bias()->value = {0.4, -0.7, 1.1};
      const Tensor x = oracle::random_tensor(Shape4{4, 5, 3, 3}, rng, -1.0, 2.0);
      const Mat<double> w = oracle::random_tensor(Shape4{4, 3, 1, 1}, rng).as_matrix();

      auto f = [&](const std::vector<double>& xv) {
        Tensor xx(x.shape(), xv);
        return (net.forward(xx, Mode::kTrain).array() * w.array()).sum();
      };
      net.forward(x, Mode::kTrain);
      const Tensor dx = net.backward(w);
      const FdReport r = fd_check_function("attention", f, x.vec(), dx.vec());
      EXPECT_TRUE(r.passed()) << to_string(choice) << "/" << to_string(act) << " " << r.str();
    }
  }
}
