#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracle.hpp"
#include "pfnlab/model.hpp"

using namespace pfnlab;

namespace {

ModelConfig toy_config(std::size_t d, std::size_t layers, std::size_t heads, std::size_t width, std::size_t classes) {
  ModelConfig c;
  c.hidden_dim = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.feedforward_dim = 2 * d;
  c.max_features = width;
  c.max_classes = classes;
  return c;
}

double max_rel_diff(const Mat<double>& a, const Mat<double>& b) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a.data()[i]), std::abs(b.data()[i]), 1e-300});
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
  }
  return worst;
}

}  // namespace

TEST(Config, RejectsIndivisibleHeads) {
  auto c = toy_config(10, 1, 3, 4, 3);
  EXPECT_THROW(c.validate(), Error);
  c.n_heads = 2;
  EXPECT_NO_THROW(c.validate());
  c.max_classes = 11;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Embed, IdentityProjectionWithZeroLabelWeightCopiesFeatures) {
  auto c = toy_config(4, 1, 1, 4, 3);
  auto p = ModelParams<double>::zeros(c);
  p.feature_proj.setIdentity();
  auto e = oracle::random_episode(3, 2, 4, 3, 1);
  const Mat<double> z = embed_tokens(e, p);
  EXPECT_EQ(z.rows(), 5);
  EXPECT_TRUE(z.topRows(3).isApprox(e.support_x, 0.0) || z.topRows(3) == e.support_x);
  EXPECT_EQ(z.bottomRows(2), e.query_x);
}

TEST(Embed, SupportMinusQueryIsLabelTimesLabelProjection) {
  auto c = toy_config(6, 1, 1, 3, 5);
  auto p = oracle::random_params(c, 3);
  Episode<double> e;
  e.support_x = Mat<double>::Random(1, 3);
  e.query_x = e.support_x;
  e.support_y = Vec<double>::Constant(1, 3.0);
  const Mat<double> z = embed_tokens(e, p);
  const Vec<double> diff = (z.row(0) - z.row(1)).transpose();
  EXPECT_LT((diff - 3.0 * p.label_proj).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Embed, MatchesDenseOracle) {
  auto c = toy_config(4, 1, 1, 3, 4);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto p = oracle::random_params(c, seed, 2.0);
    auto e = oracle::random_episode(3, 2, 3, 4, seed + 100);
    const Mat<double> z = embed_tokens(e, p);
    const auto ref = oracle::embed(e, p);
    for (std::size_t i = 0; i < ref.size(); ++i)
      for (std::size_t r = 0; r < ref[i].size(); ++r)
        EXPECT_NEAR(z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)), ref[i][r], 1e-12);
  }
}

TEST(Embed, WidthMismatchThrows) {
  auto c = toy_config(4, 1, 1, 3, 4);
  auto p = ModelParams<double>::zeros(c);
  auto e = oracle::random_episode(2, 1, 5, 2, 0);
  try {
    embed_tokens(e, p);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::dimension_mismatch);
  }
}

TEST(Mask, TwoByTwoMatchesHandEnumeration) {
  const auto m = build_mask(2, 2);
  const int expected[4][4] = {{1, 1, 0, 0}, {1, 1, 0, 0}, {1, 1, 1, 0}, {1, 1, 0, 1}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m(i, j), expected[i][j] == 1) << i << "," << j;
}

TEST(Mask, SingleQueryAttendsAllSupportAndItself) {
  const auto m = build_mask(5, 1);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_TRUE(m(5, j));
}

TEST(Mask, PropertySweep) {
  for (std::size_t ns = 1; ns <= 12; ++ns) {
    for (std::size_t nq = 1; nq <= 12; ++nq) {
      const auto m = build_mask(ns, nq);
      for (std::size_t i = 0; i < ns + nq; ++i) {
        for (std::size_t j = 0; j < ns + nq; ++j) {
          const bool si = i < ns, sj = j < ns;
          if (si) {
            EXPECT_EQ(m(i, j), sj);
          } else {
            EXPECT_EQ(m(i, j), sj || i == j);
          }
        }
      }
    }
  }
}

TEST(Mask, WithoutQuerySelfAttention) {
  const auto m = build_mask(2, 2, false);
  EXPECT_FALSE(m(2, 2));
  EXPECT_FALSE(m(3, 3));
  EXPECT_TRUE(m(3, 1));
}

TEST(Mask, ZeroCountsAreRejected) {
  EXPECT_THROW(build_mask(0, 1), Error);
  EXPECT_THROW(build_mask(1, 0), Error);
}

TEST(Forward, SingleLayerSingleHeadMatchesOracle) {
  auto c = toy_config(4, 1, 1, 3, 3);
  auto p = oracle::random_params(c, 11);
  auto e = oracle::random_episode(4, 3, 3, 3, 12);
  const Mat<double> out = forward(e, p, c);
  const auto ref = oracle::forward(e, p, c);
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t k = 0; k < ref[i].size(); ++k)
      EXPECT_NEAR(out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)), ref[i][k], 1e-10);
}

TEST(Forward, DeepMultiHeadMatchesOracle) {
  for (bool self : {true, false}) {
    auto c = toy_config(8, 3, 2, 5, 4);
    c.query_self_attention = self;
    auto p = oracle::random_params(c, 21);
    auto e = oracle::random_episode(6, 4, 5, 4, 22);
    const Mat<double> out = forward(e, p, c);
    const auto ref = oracle::forward(e, p, c);
    for (std::size_t i = 0; i < ref.size(); ++i)
      for (std::size_t k = 0; k < ref[i].size(); ++k)
        EXPECT_NEAR(out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)), ref[i][k], 1e-10);
  }
}

TEST(Forward, RegressionHeadMatchesOracle) {
  auto c = toy_config(8, 2, 2, 4, 10);
  c.task = TaskKind::regression;
  auto p = oracle::random_params(c, 5);
  auto e = oracle::random_episode(5, 2, 4, 3, 6);
  const Mat<double> out = forward(e, p, c);
  ASSERT_EQ(out.cols(), 1);
  const auto ref = oracle::forward(e, p, c);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out(static_cast<Eigen::Index>(i), 0), ref[i][0], 1e-10);
}

TEST(Forward, DuplicatedQueryGivesIdenticalOutputs) {
  auto c = toy_config(8, 2, 2, 4, 3);
  auto p = oracle::random_params(c, 7);
  auto single = oracle::random_episode(5, 1, 4, 3, 8, false);
  auto dup = single;
  dup.query_x = Mat<double>(2, 4);
  dup.query_x.row(0) = single.query_x.row(0);
  dup.query_x.row(1) = single.query_x.row(0);
  const Mat<double> a = forward(single, p, c);
  const Mat<double> b = forward(dup, p, c);
  EXPECT_LE(max_rel_diff(b.row(0), b.row(1)), 1e-12);
  EXPECT_LE(max_rel_diff(a.row(0), b.row(0)), 1e-12);
}

TEST(Forward, ZeroHeadGivesUniformDistribution) {
  auto c = toy_config(8, 2, 2, 4, 5);
  std::mt19937_64 rng(1);
  auto p = ModelParams<double>::initialize(c, rng);
  auto e = oracle::random_episode(5, 3, 4, 5, 2, false);
  const Mat<double> logits = forward(e, p, c);
  EXPECT_EQ(logits.cwiseAbs().maxCoeff(), 0.0);
  const Mat<double> probs = predict_proba(e, p, c);
  EXPECT_EQ(probs.cols(), 5);
  for (Eigen::Index i = 0; i < probs.size(); ++i) EXPECT_NEAR(probs.data()[i], 0.2, 1e-15);
}

TEST(Forward, QueryIsolation) {
  auto c = toy_config(8, 2, 2, 4, 3);
  auto p = oracle::random_params(c, 31);
  auto e = oracle::random_episode(6, 5, 4, 3, 32, false);
  const Mat<double> base = forward(e, p, c);
  auto mutated = e;
  mutated.query_x.row(3).setRandom();
  const Mat<double> after = forward(mutated, p, c);
  for (Eigen::Index i = 0; i < 5; ++i) {
    if (i == 3) continue;
    EXPECT_LE(max_rel_diff(base.row(i), after.row(i)), 1e-12);
  }
  auto alone = e;
  alone.query_x = e.query_x.row(1);
  EXPECT_LE(max_rel_diff(forward(alone, p, c).row(0), base.row(1)), 1e-12);
}

TEST(Forward, SupportPermutationInvariance) {
  auto c = toy_config(8, 2, 2, 4, 3);
  std::mt19937_64 rng(9);
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto p = oracle::random_params(c, 40 + trial);
    auto e = oracle::random_episode(7, 3, 4, 3, 60 + trial, false);
    std::vector<Eigen::Index> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto shuffled = e;
    for (Eigen::Index i = 0; i < 7; ++i) {
      shuffled.support_x.row(i) = e.support_x.row(perm[static_cast<std::size_t>(i)]);
      shuffled.support_y(i) = e.support_y(perm[static_cast<std::size_t>(i)]);
    }
    EXPECT_LE(max_rel_diff(forward(e, p, c), forward(shuffled, p, c)), 1e-5);
  }
}

TEST(Forward, Deterministic) {
  auto c = toy_config(16, 2, 4, 6, 3);
  auto p = oracle::random_params(c, 1);
  auto e = oracle::random_episode(20, 10, 6, 3, 2, false);
  const Mat<double> a = forward(e, p, c);
  const Mat<double> b = forward(e, p, c);
  EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(Forward, NonFiniteParametersAreReported) {
  auto c = toy_config(8, 2, 2, 4, 3);
  auto p = oracle::random_params(c, 1);
  p.layers[1].w1(0, 0) = std::numeric_limits<double>::infinity();
  auto e = oracle::random_episode(3, 2, 4, 3, 2, false);
  try {
    forward(e, p, c);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::non_finite_activation);
    EXPECT_NE(std::string(err.what()).find("layer 1"), std::string::npos);
  }
}

TEST(Loss, UniformLogitsGiveLogK) {
  const Mat<double> logits = Mat<double>::Zero(4, 10);
  const Vec<double> y = (Vec<double>(4) << 0, 1, 2, 3).finished();
  EXPECT_NEAR(loss(logits, y, TaskKind::classification, 7), std::log(7.0), 1e-14);
  EXPECT_NEAR(loss(logits, y, TaskKind::classification, 10), std::log(10.0), 1e-14);
}

TEST(Loss, RegressionExactPredictionIsZero) {
  const Mat<double> out = (Mat<double>(3, 1) << 0.1, 0.5, 0.9).finished();
  EXPECT_EQ(loss(out, Vec<double>(out.col(0)), TaskKind::regression), 0.0);
}

TEST(Loss, TwoClassClosedForm) {
  const Mat<double> logits = (Mat<double>(1, 2) << 2.0, 0.0).finished();
  const Vec<double> y = Vec<double>::Zero(1);
  const double expected = std::log1p(std::exp(-2.0));
  EXPECT_NEAR(loss(logits, y, TaskKind::classification, 2), expected, 1e-14);
  EXPECT_NEAR(expected, 0.1269, 5e-5);
}

TEST(Loss, LabelOutsideClassCountThrows) {
  const Mat<double> logits = Mat<double>::Zero(1, 4);
  const Vec<double> y = Vec<double>::Constant(1, 3.0);
  EXPECT_THROW(loss(logits, y, TaskKind::classification, 3), Error);
}

TEST(Backward, LabelProjectionGradientVanishesWhenAllSupportLabelsAreZero) {
  auto c = toy_config(8, 2, 2, 4, 3);
  auto p = oracle::random_params(c, 3);
  auto e = oracle::random_episode(5, 3, 4, 3, 4);
  e.support_y.setZero();
  const auto g = backward(e, p, c);
  EXPECT_EQ(g.grads.label_proj.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, MatchesFiniteDifferencesEverywhere) {
  for (bool self : {true, false}) {
    auto c = toy_config(8, 2, 2, 5, 3);
    c.query_self_attention = self;
    auto p = oracle::random_params(c, 17);
    auto e = oracle::random_episode(6, 4, 5, 3, 18);
    const auto g = backward(e, p, c);
    const auto check = oracle::finite_difference_check(
        p, g.grads,
        [&](const ModelParams<double>& q) { return loss(forward(e, q, c), *e.query_y, c.task, e.n_classes); }, 1e-4,
        1e-6);
    EXPECT_EQ(check.checked, p.parameter_count());
    EXPECT_LE(check.max_rel_error, 1e-4) << check.worst;
  }
}

TEST(Backward, RegressionMatchesFiniteDifferences) {
  auto c = toy_config(8, 2, 2, 4, 10);
  c.task = TaskKind::regression;
  auto p = oracle::random_params(c, 27);
  auto e = oracle::random_episode(5, 3, 4, 2, 28);
  for (auto& y : *e.query_y) y = y * 0.4 + 0.1;
  const auto g = backward(e, p, c);
  const auto check = oracle::finite_difference_check(
      p, g.grads, [&](const ModelParams<double>& q) { return loss(forward(e, q, c), *e.query_y, c.task); }, 1e-4,
      1e-6);
  EXPECT_LE(check.max_rel_error, 1e-4) << check.worst;
}

TEST(Backward, MeanReductionIsInvariantToDuplicatingQueries) {
  auto c = toy_config(8, 1, 2, 4, 3);
  auto p = oracle::random_params(c, 5);
  auto e = oracle::random_episode(5, 2, 4, 3, 6);
  auto doubled = e;
  doubled.query_x = Mat<double>(4, 4);
  doubled.query_x << e.query_x, e.query_x;
  doubled.query_y = Vec<double>(4);
  *doubled.query_y << *e.query_y, *e.query_y;
  const auto a = backward(e, p, c);
  const auto b = backward(doubled, p, c);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  EXPECT_LE((a.grads.head - b.grads.head).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LE((a.grads.feature_proj - b.grads.feature_proj).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Backward, NeedsQueryLabels) {
  auto c = toy_config(8, 1, 2, 4, 3);
  auto p = oracle::random_params(c, 5);
  auto e = oracle::random_episode(5, 2, 4, 3, 6, false);
  EXPECT_THROW(backward(e, p, c), Error);
}

TEST(PredictProba, ZeroLogitsAreUniform) {
  auto c = toy_config(4, 1, 1, 2, 3);
  auto p = ModelParams<double>::zeros(c);
  auto e = oracle::random_episode(2, 1, 2, 3, 0, false);
  const Mat<double> probs = predict_proba(e, p, c);
  for (Eigen::Index k = 0; k < 3; ++k) EXPECT_NEAR(probs(0, k), 1.0 / 3.0, 1e-15);
}

TEST(PredictProba, LargeLogitsDoNotOverflow) {
  const Mat<double> logits = (Mat<double>(1, 2) << 1000.0, 0.0).finished();
  const Mat<double> p = softmax_rows(logits, 2);
  EXPECT_EQ(p(0, 0), 1.0);
  EXPECT_GE(p(0, 1), 0.0);
  EXPECT_LT(p(0, 1), 1e-300);
  EXPECT_TRUE(p.allFinite());
}

TEST(PredictProba, MatchesExpNormalizeOracleAndMasksExtraClasses) {
  auto c = toy_config(8, 2, 2, 4, 6);
  auto p = oracle::random_params(c, 77);
  auto e = oracle::random_episode(6, 5, 4, 4, 78, false);
  const Mat<double> logits = forward(e, p, c);
  const Mat<double> probs = predict_proba(e, p, c);
  ASSERT_EQ(probs.cols(), 4);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(logits.cols()));
    for (Eigen::Index k = 0; k < logits.cols(); ++k) row[static_cast<std::size_t>(k)] = logits(i, k);
    const auto ref = oracle::softmax(row, 4);
    for (Eigen::Index k = 0; k < 4; ++k) EXPECT_NEAR(probs(i, k), ref[static_cast<std::size_t>(k)], 1e-12);
    EXPECT_NEAR(probs.row(i).sum(), 1.0, 1e-6);
  }
}

TEST(Params, TensorNamesAreUniqueAndCastRoundTrips) {
  auto c = toy_config(8, 2, 2, 4, 3);
  auto p = oracle::random_params(c, 1);
  std::set<std::string> names;
  for (const auto& t : p.tensors()) EXPECT_TRUE(names.insert(t.name).second) << t.name;
  const auto f = p.cast<float>();
  EXPECT_EQ(f.parameter_count(), p.parameter_count());
  EXPECT_TRUE(f.cast<double>().cast<float>() == f);
}

TEST(Params, AdaptHeadSwitchesTask) {
  auto c = toy_config(8, 1, 2, 4, 3);
  auto p = oracle::random_params(c, 1);
  auto r = c;
  r.task = TaskKind::regression;
  const auto q = adapt_head(p, r);
  EXPECT_EQ(q.head.rows(), 1);
  EXPECT_EQ(q.head.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(q.layers[0].wq, p.layers[0].wq);
}
