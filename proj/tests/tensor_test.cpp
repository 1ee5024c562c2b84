#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck_util.hpp"
#include "tpn/errors.hpp"
#include "tpn/rng.hpp"
#include "tpn/tensor.hpp"

namespace tpn {
namespace {

using testing::check_gradients;
using testing::random_tensor;

class TensorTest : public ::testing::Test {
 protected:
  void SetUp() override { Tape::current().reset(); }
  void TearDown() override { Tape::current().reset(); }
};

TEST_F(TensorTest, MatmulIdentity) {
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto out = matmul(Tensor::eye(2), m);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST_F(TensorTest, MatmulRowByColumn) {
  auto out = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  ASSERT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out.item(), 11.0);
}

TEST_F(TensorTest, MatmulMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST_F(TensorTest, ZeroSizedShapeRejected) { EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError); }

TEST_F(TensorTest, Conv2dZeroKernelGivesBias) {
  auto x = random_tensor({1, 1, 5, 5}, 1, false);
  auto out = conv2d(x, Tensor::zeros({2, 1, 3, 3}), Tensor::from({2}, {0.5, -1.5}));
  ASSERT_EQ(out.shape(), (Shape{1, 2, 5, 5}));
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(out.at(i), 0.5);
    EXPECT_EQ(out.at(25 + i), -1.5);
  }
}

TEST_F(TensorTest, Conv2dPreservesSpatialSizeAt84) {
  auto x = Tensor::full({1, 3, 84, 84}, 0.1);
  auto w = Tensor::full({64, 3, 3, 3}, 0.01);
  auto out = conv2d(x, w, Tensor::zeros({64}));
  EXPECT_EQ(out.shape(), (Shape{1, 64, 84, 84}));
}

TEST_F(TensorTest, Conv2dDeltaKernelIsIdentity) {
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  auto w = Tensor::from({1, 1, 3, 3}, k);
  auto single = conv2d(Tensor::from({1, 1, 1, 1}, {2.5}), w, Tensor::zeros({1}));
  EXPECT_EQ(single.item(), 2.5);
  auto x = random_tensor({2, 1, 4, 3}, 2, false);
  auto out = conv2d(x, w, Tensor::zeros({1}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.at(i), x.at(i));
}

TEST_F(TensorTest, Conv2dChannelMismatch) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({3, 3, 3, 3}), Tensor::zeros({3})), DimensionError);
}

TEST_F(TensorTest, MaxpoolBasic) {
  auto out = maxpool2d(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(out.item(), 4.0);
}

TEST_F(TensorTest, MaxpoolSpatialChain) {
  auto x = Tensor::zeros({1, 1, 84, 84});
  const std::vector<std::size_t> expected{42, 21, 10, 5};
  for (auto e : expected) {
    x = maxpool2d(x);
    EXPECT_EQ(x.dim(2), e);
    EXPECT_EQ(x.dim(3), e);
  }
}

TEST_F(TensorTest, MaxpoolTiesRouteToFirstCell) {
  auto x = Tensor::full({1, 1, 4, 5}, 3.0, true);
  auto out = maxpool2d(x);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 2, 2}));
  for (double v : out.data()) EXPECT_EQ(v, 3.0);
  backward(sum(out));
  const auto g = x.grad();
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t c = 0; c < 5; ++c) {
      const bool first = (y % 2 == 0) && (c % 2 == 0) && c < 4;
      EXPECT_EQ(g[y * 5 + c], first ? 1.0 : 0.0) << y << "," << c;
    }
}

TEST_F(TensorTest, MaxpoolTooSmall) { EXPECT_THROW(maxpool2d(Tensor::zeros({1, 1, 1, 4})), DimensionError); }

TEST_F(TensorTest, BatchnormZeroVarianceGivesBeta) {
  auto x = Tensor::full({3, 2, 2, 2}, 7.0);
  auto out = batchnorm(x, Tensor::from({2}, {2.0, 3.0}), Tensor::from({2}, {0.25, -0.75}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out.at((b * 2 + c) * 4 + i), c == 0 ? 0.25 : -0.75);
}

TEST_F(TensorTest, BatchnormUnitVarianceHandComputed) {
  auto x = Tensor::from({2, 1}, {-1.0, 1.0});
  auto out = batchnorm(x, Tensor::from({1}, {1.0}), Tensor::from({1}, {0.0}));
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(out.at(0), -expected, 1e-15);
  EXPECT_NEAR(out.at(1), expected, 1e-15);
}

TEST_F(TensorTest, BatchnormOutputMomentsMatchAffine) {
  auto x = random_tensor({6, 3, 2, 2}, 3, false, -4.0, 9.0);
  const std::vector<double> gamma{1.5, -0.5, 2.0}, beta{0.3, -1.0, 4.0};
  auto out = batchnorm(x, Tensor::from({3}, gamma), Tensor::from({3}, beta), 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t i = 0; i < 4; ++i) m += out.at((b * 3 + c) * 4 + i);
    m /= 24.0;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t i = 0; i < 4; ++i) v += std::pow(out.at((b * 3 + c) * 4 + i) - m, 2);
    EXPECT_NEAR(m, beta[c], 1e-6);
    EXPECT_NEAR(std::sqrt(v / 24.0), std::abs(gamma[c]), 1e-6);
  }
}

TEST_F(TensorTest, BatchnormNeedsTwoExamples) {
  EXPECT_THROW(batchnorm(Tensor::zeros({1, 2}), Tensor::zeros({2}), Tensor::zeros({2})), DimensionError);
}

TEST_F(TensorTest, ReluAndSoftplusValues) {
  auto r = relu(Tensor::from({3}, {-1, 0, 2}));
  EXPECT_EQ(r.at(0), 0.0);
  EXPECT_EQ(r.at(1), 0.0);
  EXPECT_EQ(r.at(2), 2.0);
  EXPECT_NEAR(softplus(Tensor::scalar(0.0)).item(), 0.693147180559945, 1e-12);
  const double big = softplus(Tensor::scalar(50.0)).item();
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 50.0, 1e-12);
  EXPECT_TRUE(std::isfinite(softplus(Tensor::scalar(1000.0)).item()));
}

TEST_F(TensorTest, ReluSubgradientAtZeroIsZero) {
  auto x = Tensor::from({3}, {-1, 0, 2}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST_F(TensorTest, LinsolveIdentity) {
  auto b = random_tensor({3, 2}, 4, false);
  auto x = linsolve(Tensor::eye(3), b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(x.at(i), b.at(i));
}

TEST_F(TensorTest, LinsolveDiagonal) {
  auto x = linsolve(Tensor::from({2, 2}, {2, 0, 0, 4}), Tensor::from({2, 1}, {2, 8}));
  EXPECT_DOUBLE_EQ(x.at(0), 1.0);
  EXPECT_DOUBLE_EQ(x.at(1), 2.0);
}

TEST_F(TensorTest, LinsolveSingularCarriesPivotIndex) {
  try {
    linsolve(Tensor::from({3, 3}, {1, 2, 3, 2, 4, 6, 0, 0, 1}), Tensor::zeros({3, 1}));
    FAIL() << "expected SingularMatrixError";
  } catch (const SingularMatrixError& e) {
    EXPECT_EQ(e.pivot_index(), 1u);
  }
}

TEST_F(TensorTest, LinsolveGradientMatchesFiniteDifferences) {
  auto a = random_tensor({4, 4}, 5);
  {
    auto v = a.mutable_data();
    for (std::size_t i = 0; i < 4; ++i) v[i * 4 + i] += 3.0;
  }
  auto b = random_tensor({4, 3}, 6);
  auto res = check_gradients([&] { return sum(linsolve(a, b)); }, {a, b}, 1e-5, 1e-6, 1e-9);
  EXPECT_TRUE(res.ok) << "max rel " << res.max_rel_error;
}

TEST_F(TensorTest, LinsolveResidualProperty) {
  for (unsigned seed = 0; seed < 50; ++seed) {
    Rng rng(seed, Stream::kNoise);
    const std::size_t n = 2 + rng.uniform_index(40);
    auto a = random_tensor({n, n}, 100 + seed, false);
    auto v = a.mutable_data();
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] += static_cast<double>(n);  // diagonally dominant
    auto b = random_tensor({n, 3}, 200 + seed, false, -10, 10);
    auto x = linsolve(a, b);
    auto ax = matmul(a, x);
    double res = 0.0, bmax = 0.0;
    for (std::size_t i = 0; i < b.numel(); ++i) {
      res = std::max(res, std::abs(ax.at(i) - b.at(i)));
      bmax = std::max(bmax, std::abs(b.at(i)));
    }
    EXPECT_LE(res, 1e-9 * bmax) << "n=" << n;
  }
}

TEST_F(TensorTest, SoftmaxCeValues) {
  const std::vector<int> labels{0, 0};
  const std::vector<char> mask{1, 1};
  auto loss = row_softmax_ce(Tensor::from({2, 2}, {0, 0, 100, 0}), labels, mask);
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
  const std::vector<char> only_second{0, 1};
  EXPECT_NEAR(row_softmax_ce(Tensor::from({2, 2}, {0, 0, 100, 0}), labels, only_second).item(), 0.0, 1e-40);
}

TEST_F(TensorTest, SoftmaxCeErrors) {
  const std::vector<int> labels{0, 5};
  EXPECT_THROW(row_softmax_ce(Tensor::zeros({2, 3}), labels, std::vector<char>{0, 0}), ConfigError);
  EXPECT_THROW(row_softmax_ce(Tensor::zeros({2, 3}), labels, std::vector<char>{1, 1}), ConfigError);
  // out-of-range label on an unmasked row is ignored
  EXPECT_NO_THROW(row_softmax_ce(Tensor::zeros({2, 3}), labels, std::vector<char>{1, 0}));
}

TEST_F(TensorTest, SoftmaxCeGradient) {
  auto f = random_tensor({3, 4}, 7, true, -2, 2);
  const std::vector<int> labels{1, 3, 0};
  const std::vector<char> mask{1, 0, 1};
  auto res = check_gradients([&] { return row_softmax_ce(f, labels, mask); }, {f}, 1e-5, 1e-6, 1e-9);
  EXPECT_TRUE(res.ok) << res.max_rel_error;
  // unmasked row gets nothing
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(f.grad()[4 + j], 0.0);
}

TEST_F(TensorTest, BackwardSquare) {
  auto x = Tensor::from({1}, {3.0}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST_F(TensorTest, BackwardIndependentLeafStaysZero) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto y = Tensor::from({2}, {5.0, 6.0}, true);
  backward(sum(exp(x)));
  EXPECT_TRUE(!y.has_grad() || (y.grad()[0] == 0.0 && y.grad()[1] == 0.0));
}

TEST_F(TensorTest, ConstantNeverAccumulates) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto c = Tensor::from({2}, {3.0, 4.0}, false);
  backward(sum(mul(x, c)));
  EXPECT_FALSE(c.has_grad());
}

TEST_F(TensorTest, SharedNodeAccumulatesToBothLeaves) {
  auto a = random_tensor({2, 3}, 8);
  auto b = random_tensor({3, 2}, 9);
  auto fn = [&] {
    auto p = matmul(a, b);          // shared node
    auto q = mul(p, p);
    return sum(add(exp(scale(p, 0.3)), q));
  };
  auto res = check_gradients(fn, {a, b});
  EXPECT_TRUE(res.ok) << res.max_rel_error;
}

TEST_F(TensorTest, BackwardErrors) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(exp(x)), TapeError);
  Tape::current().reset();
  auto loss = sum(exp(x));
  backward(loss);
  EXPECT_THROW(backward(loss), TapeError);
}

TEST_F(TensorTest, ForwardIsBitIdenticalAfterReset) {
  auto a = random_tensor({5, 5}, 10);
  auto b = random_tensor({5, 2}, 11);
  auto run = [&] {
    Tape::current().reset();
    auto s = normalized_adjacency(sym_max(exp(scale(pairwise_sqdist(a), -0.5))));
    auto m = sub(Tensor::eye(5), scale(s, 0.9));
    auto loss = sum(linsolve(m, b));
    backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    a.zero_grad();
    b.zero_grad();
    return out;
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable op against central differences on random inputs.
class OpGradientTest : public TensorTest, public ::testing::WithParamInterface<unsigned> {};

TEST_P(OpGradientTest, ElementwiseAndShapeOps) {
  const unsigned s = GetParam();
  auto a = random_tensor({3, 4}, s);
  auto b = random_tensor({3, 4}, s + 1000);
  auto r = check_gradients(
      [&] {
        auto t = add(mul(a, b), sub(softplus(scale(a, 2.0)), relu(add_scalar(b, 0.1))));
        t = exp(scale(t, 0.5));
        return sum(reshape(transpose(t), {2, 6}));
      },
      {a, b});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST_P(OpGradientTest, LinearAndMask) {
  const unsigned s = GetParam();
  auto x = random_tensor({4, 3}, s);
  auto w = random_tensor({3, 5}, s + 1);
  auto bias = random_tensor({5}, s + 2);
  std::vector<double> mask(20);
  for (std::size_t i = 0; i < 20; ++i) mask[i] = (i * 7 + s) % 3 == 0 ? 0.0 : 1.0;
  auto r = check_gradients([&] { return sum(exp(scale(mask_mul(linear(x, w, bias), mask), 0.4))); }, {x, w, bias});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST_P(OpGradientTest, GraphPrimitives) {
  const unsigned s = GetParam();
  auto f = random_tensor({5, 3}, s);
  auto sig = random_tensor({5}, s + 7, true, 0.5, 2.0);
  auto y = random_tensor({5, 2}, s + 9, false);
  auto r = check_gradients(
      [&] {
        auto w = exp(scale(pairwise_sqdist(div_rows(f, sig)), -0.5));
        std::vector<double> offdiag(25, 1.0);
        for (std::size_t i = 0; i < 5; ++i) offdiag[i * 5 + i] = 0.0;
        auto sn = normalized_adjacency(sym_max(mask_mul(w, offdiag)));
        return sum(mul(matmul(sn, y), matmul(sn, y)));
      },
      {f, sig});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST_P(OpGradientTest, ConvPoolBatchnorm) {
  const unsigned s = GetParam();
  auto x = random_tensor({2, 2, 5, 4}, s);
  auto w = random_tensor({3, 2, 3, 3}, s + 1);
  auto bias = random_tensor({3}, s + 2);
  auto gamma = random_tensor({3}, s + 3, true, 0.5, 1.5);
  auto beta = random_tensor({3}, s + 4);
  auto r = check_gradients(
      [&] {
        auto h = batchnorm(conv2d(x, w, bias), gamma, beta);
        auto p = maxpool2d(h);
        return sum(mul(p, add_scalar(p, 0.3)));
      },
      {x, w, bias, gamma, beta});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST_P(OpGradientTest, LinsolveAndSoftmax) {
  const unsigned s = GetParam();
  auto m = random_tensor({4, 4}, s, true, -0.2, 0.2);
  auto y = random_tensor({4, 3}, s + 5);
  const std::vector<int> labels{2, 0, 1, 1};
  const std::vector<char> mask{1, 1, 0, 1};
  auto r = check_gradients(
      [&] { return row_softmax_ce(linsolve(sub(Tensor::eye(4), m), y), labels, mask); }, {m, y});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradientTest, ::testing::Values(1u, 2u, 3u, 4u, 5u));

}  // namespace
}  // namespace tpn
