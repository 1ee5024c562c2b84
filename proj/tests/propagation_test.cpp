#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck_util.hpp"
#include "tpn/errors.hpp"
#include "tpn/graph.hpp"
#include "tpn/propagation.hpp"
#include "tpn/rng.hpp"

namespace tpn {
namespace {

using testing::random_tensor;

class PropagationTest : public ::testing::Test {
 protected:
  void SetUp() override { Tape::current().reset(); }
  void TearDown() override { Tape::current().reset(); }
};

using Dense = std::vector<std::vector<double>>;

// Gauss-Jordan with partial pivoting, written independently of the library LU.
Dense dense_solve(Dense a, Dense b) {
  const std::size_t n = a.size(), m = b[0].size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      for (std::size_t c = 0; c < m; ++c) b[r][c] -= f * b[col][c];
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) b[r][c] /= a[r][r];
  return b;
}

Dense to_dense(const Tensor& t) {
  Dense d(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) d[i][j] = t.at(i, j);
  return d;
}

Dense closed_oracle(const Tensor& s, const Tensor& y, double alpha) {
  Dense a = to_dense(s);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) a[i][j] = (i == j ? 1.0 : 0.0) - alpha * a[i][j];
  return dense_solve(a, to_dense(y));
}

Tensor chain_s() { return normalized_laplacian(Tensor::from({3, 3}, {0, 1, 0, 1, 0, 1, 0, 1, 0})); }
Tensor chain_y() { return Tensor::from({3, 2}, {1, 0, 0, 0, 0, 1}); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

TEST_F(PropagationTest, ChainClosedFormMatchesHandValues) {
  const auto r = propagate_closed(chain_s(), chain_y(), 0.5);
  EXPECT_NEAR(r.scores.at(0, 0), 7.0 / 6.0, 1e-6);
  EXPECT_NEAR(r.scores.at(1, 0), 0.4714, 1e-4);
  EXPECT_NEAR(r.scores.at(1, 0), std::sqrt(2.0) / 3.0, 1e-12);
  EXPECT_NEAR(r.scores.at(2, 0), 1.0 / 6.0, 1e-6);
  EXPECT_NEAR(r.scores.at(1, 0), r.scores.at(1, 1), 1e-12);
}

TEST_F(PropagationTest, ChainClosedFormMatchesDenseOracle) {
  const auto s = chain_s();
  const auto r = propagate_closed(s, chain_y(), 0.5);
  const auto oracle = closed_oracle(s, chain_y(), 0.5);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(r.scores.at(i, j), oracle[i][j], 1e-12);
}

TEST_F(PropagationTest, TinyAlphaLeavesLabelsUnchanged) {
  const auto y = chain_y();
  const auto r = propagate_closed(chain_s(), y, 1e-12);
  EXPECT_LE(max_abs_diff(r.scores, y), 1e-9);
}

TEST_F(PropagationTest, ZeroLabelsGiveZeroScores) {
  const auto r = propagate_closed(chain_s(), Tensor::zeros({3, 2}), 0.99);
  for (double v : r.scores.data()) EXPECT_EQ(v, 0.0);
}

TEST_F(PropagationTest, AlphaOutsideOpenIntervalRejected) {
  EXPECT_THROW(propagate_closed(chain_s(), chain_y(), 0.0), ConfigError);
  EXPECT_THROW(propagate_closed(chain_s(), chain_y(), 1.0), ConfigError);
  EXPECT_THROW(propagate_iterative(chain_s(), chain_y(), 0.5, 0), ConfigError);
}

TEST_F(PropagationTest, OneIterationFormula) {
  const auto s = chain_s();
  const auto y = chain_y();
  const double alpha = 0.7;
  const auto r = propagate_iterative(s, y, alpha, 1);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double sy = 0.0;
      for (std::size_t j = 0; j < 3; ++j) sy += s.at(i, j) * y.at(j, c);
      EXPECT_NEAR(r.scores.at(i, c), alpha * sy + (1 - alpha) * y.at(i, c), 1e-15);
    }
}

TEST_F(PropagationTest, ChainIterativeConvergesToScaledClosedForm) {
  const auto closed = propagate_closed(chain_s(), chain_y(), 0.5);
  const auto iter = propagate_iterative(chain_s(), chain_y(), 0.5, 100);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(iter.scores.at(i), 0.5 * closed.scores.at(i), 1e-9);
  EXPECT_EQ(iter.preds, closed.preds);
}

struct RandomEpisode {
  Tensor s, y;
};

RandomEpisode random_episode(unsigned seed, std::size_t n, std::size_t classes) {
  const auto g = build_graph(random_tensor({n, 4}, seed, false, -2, 2), random_tensor({n}, seed + 1, false, .5, 2));
  std::vector<double> y(n * classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) y[c * classes + c] = 1.0;  // first `classes` rows labeled
  return {g.normalized, Tensor::from({n, classes}, y)};
}

class FixedPoint : public PropagationTest, public ::testing::WithParamInterface<unsigned> {};

TEST_P(FixedPoint, ErrorBoundedGeometrically) {
  const double alpha = 0.99;
  const auto ep = random_episode(GetParam(), 30, 5);
  const auto closed = propagate_closed(ep.s, ep.y, alpha);
  const auto f1 = propagate_iterative(ep.s, ep.y, alpha, 1);
  const double step = max_abs_diff(f1.scores, ep.y);
  double prev = INFINITY;
  for (std::size_t t : {10u, 100u, 1000u, 5000u}) {
    const auto ft = propagate_iterative(ep.s, ep.y, alpha, t);
    double err = 0.0;
    for (std::size_t i = 0; i < ft.scores.numel(); ++i)
      err = std::max(err, std::abs(ft.scores.at(i) - (1 - alpha) * closed.scores.at(i)));
    EXPECT_LE(err, step * std::pow(alpha, static_cast<double>(t)) / (1 - alpha) + 1e-12) << "t=" << t;
    if (prev > 1e-14) EXPECT_LE(err, prev);
    prev = err;
  }
}

TEST_P(FixedPoint, ArgmaxAgreesWhereGapIsClear) {
  const double alpha = 0.99;
  const auto ep = random_episode(GetParam() + 500, 40, 5);
  const auto closed = propagate_closed(ep.s, ep.y, alpha);
  const auto iter = propagate_iterative(ep.s, ep.y, alpha, 3000);
  for (std::size_t i = 0; i < closed.rows(); ++i) {
    std::vector<double> row(5);
    for (std::size_t c = 0; c < 5; ++c) row[c] = closed.scores.at(i, c);
    std::sort(row.begin(), row.end(), std::greater<>());
    if ((row[0] - row[1]) * (1 - alpha) > 1e-8) EXPECT_EQ(iter.preds[i], closed.preds[i]) << "row " << i;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, FixedPoint, ::testing::Range(1u, 11u));

TEST_F(PropagationTest, ProbabilityRowsSumToOne) {
  for (unsigned seed = 1; seed <= 10; ++seed) {
    const auto ep = random_episode(seed, 25, 5);
    const auto r = propagate_closed(ep.s, ep.y, 0.99);
    for (std::size_t i = 0; i < r.rows(); ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < 5; ++c) total += r.probs[i * 5 + c];
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST_F(PropagationTest, PredsBreakTiesTowardLowerClass) {
  const auto r = propagate_closed(Tensor::zeros({2, 2}), Tensor::from({2, 3}, {0, 0, 0, 0, 1, 1}), 0.5);
  EXPECT_EQ(r.preds[0], 0);
  EXPECT_EQ(r.preds[1], 1);
}

LabelMatrix five_way(std::size_t k_shot) {
  std::vector<int> support, query;
  for (int c = 0; c < 5; ++c) {
    for (std::size_t k = 0; k < k_shot; ++k) support.push_back(c);
    for (int q = 0; q < 15; ++q) query.push_back(c);
  }
  return LabelMatrix::build(support, query, 5);
}

TEST_F(PropagationTest, UniformScoresLossUnion) {
  const auto labels = five_way(1);
  ASSERT_EQ(labels.rows(), 80u);
  const auto r = propagate_closed(Tensor::zeros({80, 80}), Tensor::zeros({80, 5}), 0.5);
  EXPECT_NEAR(episode_loss(r, labels).item(), 80 * std::log(5.0), 1e-9);
}

TEST_F(PropagationTest, UniformScoresLossQueryOnly) {
  const auto labels = five_way(1);
  const auto r = propagate_closed(Tensor::zeros({80, 80}), Tensor::zeros({80, 5}), 0.5);
  EXPECT_NEAR(episode_loss(r, labels, LossScope::kQueryOnly).item(), 75 * std::log(5.0), 1e-9);
}

TEST_F(PropagationTest, SaturatedScoresGiveNearZeroLoss) {
  const auto labels = five_way(1);
  std::vector<double> y(80 * 5, 0.0);
  for (std::size_t i = 0; i < 80; ++i) y[i * 5 + labels.true_labels[i]] = 100.0;
  const auto r = propagate_closed(Tensor::zeros({80, 80}), Tensor::from({80, 5}, y), 0.5);
  EXPECT_LT(episode_loss(r, labels).item(), 1e-30);
}

TEST_F(PropagationTest, LabelMatrixLayout) {
  const auto labels = five_way(5);
  EXPECT_EQ(labels.rows(), 100u);
  for (std::size_t i = 0; i < 100; ++i) {
    const bool support = i < 25;
    EXPECT_EQ(static_cast<bool>(labels.support_mask[i]), support);
    double row = 0.0;
    for (std::size_t c = 0; c < 5; ++c) row += labels.y.at(i, c);
    EXPECT_EQ(row, support ? 1.0 : 0.0);
    if (support) EXPECT_EQ(labels.y.at(i, labels.true_labels[i]), 1.0);
  }
  EXPECT_THROW(LabelMatrix::build(std::vector<int>{0, 5}, std::vector<int>{}, 5), ConfigError);
}

TEST_F(PropagationTest, MissingLabelInScopeIsAnError) {
  const std::vector<int> support{0, 1}, rest{-1, 1};
  const auto labels = LabelMatrix::build(support, rest, 2);
  const auto r = propagate_closed(Tensor::zeros({4, 4}), labels.y, 0.5);
  EXPECT_THROW(episode_loss(r, labels), ConfigError);
  const std::vector<int> rest_ok{0, 1};
  const auto ok = LabelMatrix::build(support, rest_ok, 2);
  EXPECT_NO_THROW(episode_loss(r, ok, LossScope::kQueryOnly));
}

TEST_F(PropagationTest, LossGradientMatchesFiniteDifferences) {
  const std::vector<int> support{0, 1, 2}, rest{0, 1, 2, 2};
  const auto labels = LabelMatrix::build(support, rest, 3);
  auto f = random_tensor({7, 3}, 41, true, -1, 1);
  auto s = random_tensor({7}, 42, true, 0.7, 1.6);
  for (auto scope : {LossScope::kUnion, LossScope::kQueryOnly}) {
    const auto r = testing::check_gradients(
        [&] { return episode_loss(propagate_closed(build_graph(f, s, 4).normalized, labels.y, 0.99), labels, scope); },
        {f, s});
    EXPECT_TRUE(r.ok) << to_string(scope) << " rel " << r.max_rel_error;
  }
}

TEST_F(PropagationTest, SupportRowsKeepLabelsOnSeparatedData) {
  // three tight, far-apart clusters
  std::vector<double> pts;
  std::vector<int> support{0, 1, 2}, rest;
  Rng rng(3, Stream::kNoise, 0);
  const double centers[3][2] = {{0, 0}, {6, 0}, {0, 6}};
  for (int c = 0; c < 3; ++c) pts.insert(pts.end(), {centers[c][0], centers[c][1]});
  for (int c = 0; c < 3; ++c)
    for (int q = 0; q < 4; ++q) {
      pts.insert(pts.end(), {centers[c][0] + 0.1 * rng.normal(), centers[c][1] + 0.1 * rng.normal()});
      rest.push_back(c);
    }
  const auto labels = LabelMatrix::build(support, rest, 3);
  const auto g = build_graph(Tensor::from({15, 2}, pts), Tensor::full({15}, 1.0), 4);
  const auto r = propagate_closed(g.normalized, labels.y, 0.99);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(r.preds[i], labels.true_labels[i]) << i;
}

TEST_F(PropagationTest, ParseLossScope) {
  EXPECT_EQ(parse_loss_scope("union"), LossScope::kUnion);
  EXPECT_EQ(parse_loss_scope("query_only"), LossScope::kQueryOnly);
  EXPECT_THROW(parse_loss_scope("support"), ConfigError);
}

NetworkConfig tiny_mlp() {
  NetworkConfig cfg;
  cfg.input_shape = {2};
  cfg.hidden = 16;
  cfg.embed_dim = 8;
  return cfg;
}

TEST_F(PropagationTest, SemiDuplicateOfSupportTakesItsLabel) {
  TpnModel model(tiny_mlp(), 12);
  const auto support = Tensor::from({3, 2}, {-1.0, 0.0, 1.0, 0.0, 0.0, 1.5});
  const std::vector<int> support_labels{0, 1, 2};
  const auto pool = Tensor::from({2, 2}, {0.1, 0.4, -0.3, 0.9});
  NoGradGuard guard;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto q = Tensor::from({1, 2}, {support.at(i, 0), support.at(i, 1)});
    EXPECT_EQ(classify_semi(model, support, support_labels, 3, pool, q, 2), support_labels[i]);
  }
}

TEST_F(PropagationTest, SemiWithEmptyPoolMatchesSingleQueryInference) {
  TpnModel model(tiny_mlp(), 13);
  const auto support = random_tensor({4, 2}, 50, false, -2, 2);
  const std::vector<int> support_labels{0, 1, 0, 1};
  NoGradGuard guard;
  for (unsigned seed = 0; seed < 10; ++seed) {
    const auto q = random_tensor({1, 2}, 60 + seed, false, -2, 2);
    const Tensor parts[] = {support, q};
    const std::vector<int> unknown{-1};
    const auto inf = infer(model, concat_rows(parts), LabelMatrix::build(support_labels, unknown, 2), 20, 0.99);
    EXPECT_EQ(classify_semi(model, support, support_labels, 2, Tensor{}, q), inf.result.preds.back());
  }
}

TEST_F(PropagationTest, SemiRejectsMultipleQueries) {
  TpnModel model(tiny_mlp(), 1);
  const std::vector<int> labels{0, 1};
  EXPECT_THROW(classify_semi(model, Tensor::zeros({2, 2}), labels, 2, Tensor{}, Tensor::zeros({2, 2})),
               DimensionError);
}

TEST_F(PropagationTest, ConcatRowsChecksShapes) {
  const Tensor ok[] = {Tensor::zeros({2, 3}), Tensor::zeros({1, 3})};
  EXPECT_EQ(concat_rows(ok).shape(), (Shape{3, 3}));
  const Tensor bad[] = {Tensor::zeros({2, 3}), Tensor::zeros({1, 4})};
  EXPECT_THROW(concat_rows(bad), DimensionError);
}

}  // namespace
}  // namespace tpn
