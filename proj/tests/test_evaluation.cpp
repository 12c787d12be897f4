#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "tweedie_avb/evaluation.hpp"

using namespace tweedie_avb;

namespace {

const std::vector<double> kY{0.0, 1.0, 2.0};
const std::vector<double> kFlat{1.0, 1.0, 1.0};
const std::vector<double> kMisordered{2.0, 1.0, 0.5};
const std::vector<double> kOrdered{0.5, 1.0, 2.0};

void expect_points(const LorenzCurve& c, const std::vector<std::pair<double, double>>& want) {
  ASSERT_EQ(c.points.size(), want.size());
  for (std::size_t k = 0; k < want.size(); ++k) {
    EXPECT_NEAR(c.points[k].share_baseline, want[k].first, 1e-15) << k;
    EXPECT_NEAR(c.points[k].share_outcome, want[k].second, 1e-15) << k;
  }
}

struct Portfolio {
  std::vector<double> y, p, yhat;
};

Portfolio random_portfolio(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::lognormal_distribution<double> lg(0.0, 0.6);
  std::bernoulli_distribution claim(0.3);
  Portfolio out;
  for (std::size_t i = 0; i < n; ++i) {
    const double risk = lg(rng);
    out.p.push_back(lg(rng));
    out.yhat.push_back(risk);
    out.y.push_back(claim(rng) ? risk * lg(rng) * 3.0 : 0.0);
  }
  return out;
}

}  // namespace

TEST(OrderedLorenz, MisorderedHandExample) {
  expect_points(ordered_lorenz(kY, kFlat, kMisordered), {{0, 0}, {1.0 / 3, 2.0 / 3}, {2.0 / 3, 1}, {1, 1}});
}

TEST(OrderedLorenz, WellOrderedHandExample) {
  expect_points(ordered_lorenz(kY, kFlat, kOrdered), {{0, 0}, {1.0 / 3, 0}, {2.0 / 3, 1.0 / 3}, {1, 1}});
}

TEST(OrderedLorenz, EqualPredictionsGiveDiagonal) {
  const auto pf = random_portfolio(50, 1);
  const auto c = ordered_lorenz(pf.y, pf.p, pf.p);
  for (const auto& pt : c.points) EXPECT_EQ(pt.share_baseline, pt.share_outcome);
  EXPECT_EQ(gini_index(c), 0.0);
}

TEST(OrderedLorenz, TiesShareOnePoint) {
  // rows 0 and 2 tie at r = 1
  const std::vector<double> y{3.0, 0.0, 1.0}, p{1.0, 2.0, 2.0}, yhat{1.0, 1.0, 2.0};
  expect_points(ordered_lorenz(y, p, yhat), {{0, 0}, {0.4, 0.0}, {1, 1}});
}

TEST(OrderedLorenz, EndpointsAndMonotonicity) {
  const auto pf = random_portfolio(500, 2);
  const auto c = ordered_lorenz(pf.y, pf.p, pf.yhat);
  EXPECT_EQ(c.points.front().share_baseline, 0.0);
  EXPECT_EQ(c.points.front().share_outcome, 0.0);
  EXPECT_EQ(c.points.back().share_baseline, 1.0);
  EXPECT_EQ(c.points.back().share_outcome, 1.0);
  for (std::size_t k = 1; k < c.points.size(); ++k) {
    EXPECT_GT(c.points[k].share_baseline, c.points[k - 1].share_baseline);
    EXPECT_GE(c.points[k].share_outcome, c.points[k - 1].share_outcome);
  }
}

TEST(OrderedLorenz, ScaleInvariance) {
  const auto pf = random_portfolio(400, 3);
  const auto ref = ordered_lorenz(pf.y, pf.p, pf.yhat);
  for (double c : {0.5, 3.7, 1e-3, 250.0}) {
    auto scaled = pf.yhat;
    for (double& v : scaled) v *= c;
    const auto got = ordered_lorenz(pf.y, pf.p, scaled);
    ASSERT_EQ(got.points.size(), ref.points.size());
    for (std::size_t k = 0; k < ref.points.size(); ++k) {
      EXPECT_EQ(got.points[k].share_baseline, ref.points[k].share_baseline);
      EXPECT_EQ(got.points[k].share_outcome, ref.points[k].share_outcome);
    }
    EXPECT_EQ(gini_index(got), gini_index(ref));
  }
}

TEST(OrderedLorenz, ZeroOutcomesFollowDiagonal) {
  const std::vector<double> y{0, 0, 0};
  EXPECT_NEAR(gini_index(y, kFlat, kOrdered), 0.0, 1e-15);
}

TEST(OrderedLorenz, Errors) {
  EXPECT_THROW(ordered_lorenz(kY, std::vector<double>{1, 0, 1}, kFlat), DomainError);
  EXPECT_THROW(ordered_lorenz(kY, std::vector<double>{1, -1, 1}, kFlat), DomainError);
  EXPECT_THROW(ordered_lorenz(kY, kFlat, std::vector<double>{0, 0, 0}), DegeneratePrediction);
  EXPECT_THROW(ordered_lorenz(kY, kFlat, std::vector<double>{1, 1}), ShapeError);
  EXPECT_THROW(ordered_lorenz(std::vector<double>{}, std::vector<double>{}, std::vector<double>{}), ShapeError);
}

TEST(GiniIndex, HandExamples) {
  EXPECT_NEAR(gini_index(ordered_lorenz(kY, kFlat, kMisordered)), -4.0 / 9.0, 1e-12);
  EXPECT_NEAR(gini_index(ordered_lorenz(kY, kFlat, kOrdered)), 4.0 / 9.0, 1e-12);
  EXPECT_EQ(gini_index(LorenzCurve{{{0, 0}, {1, 1}}}), 0.0);
}

TEST(GiniIndex, SelfComparisonIsExactlyZero) {
  for (unsigned s = 0; s < 5; ++s) {
    const auto pf = random_portfolio(300, 10 + s);
    EXPECT_EQ(gini_index(pf.y, pf.p, pf.p), 0.0);
  }
}

TEST(GiniIndex, AgreesWithSortedSumFormula) {
  // Without ties: G = 1 - sum_k (Fp_k - Fp_{k-1}) (Fy_k + Fy_{k-1}), built
  // from an independent sort on a precomputed key.
  const auto pf = random_portfolio(200, 4);
  std::vector<std::pair<double, std::size_t>> key;
  for (std::size_t i = 0; i < pf.y.size(); ++i) key.emplace_back(pf.yhat[i] / pf.p[i], i);
  std::sort(key.begin(), key.end());
  double sy = 0, sp = 0;
  for (std::size_t i = 0; i < pf.y.size(); ++i) sy += pf.y[i], sp += pf.p[i];
  double fp = 0, fy = 0, acc = 0;
  for (auto [r, i] : key) {
    const double np = fp + pf.p[i] / sp, ny = fy + pf.y[i] / sy;
    acc += (np - fp) * (ny + fy);
    fp = np, fy = ny;
  }
  EXPECT_NEAR(gini_index(pf.y, pf.p, pf.yhat), 1.0 - acc, 1e-12);
}

TEST(PairwiseGini, IdenticalModelsGiveZeros) {
  const auto pf = random_portfolio(100, 5);
  const auto m = pairwise_gini_matrix(pf.y, {{"a", pf.yhat}, {"b", pf.yhat}});
  EXPECT_FALSE(m.entries[0][0].has_value());
  EXPECT_EQ(*m.entries[0][1], 0.0);
  EXPECT_EQ(*m.entries[1][0], 0.0);
}

TEST(PairwiseGini, AsymmetricForHandModels) {
  const auto m = pairwise_gini_matrix(kY, {{"A", kMisordered}, {"B", kOrdered}});
  const double ab = gini_index(kY, kMisordered, kOrdered);
  const double ba = gini_index(kY, kOrdered, kMisordered);
  EXPECT_EQ(*m.entries[0][1], ab);
  EXPECT_EQ(*m.entries[1][0], ba);
  EXPECT_NE(ab, ba);
}

TEST(PairwiseGini, ThreeModelsHaveSixEntries) {
  const auto pf = random_portfolio(100, 6);
  auto mixed = pf.p;
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] *= pf.yhat[i];
  const auto m = pairwise_gini_matrix(pf.y, {{"a", pf.p}, {"b", pf.yhat}, {"c", mixed}});
  int populated = 0;
  for (const auto& row : m.entries)
    for (const auto& e : row) populated += e.has_value();
  EXPECT_EQ(populated, 6);
  EXPECT_EQ(m.reports().size(), 6u);
}

TEST(PairwiseGini, ErrorsCarryPairContext) {
  EXPECT_THROW(pairwise_gini_matrix(kY, {{"only", kFlat}}), UsageError);
  try {
    pairwise_gini_matrix(kY, {{"good", kFlat}, {"bad", {1, 0, 1}}});
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("baseline 'bad'"), std::string::npos);
  }
}

TEST(PairwiseGini, SplitStandardErrors) {
  const auto pf = random_portfolio(400, 7);
  const std::vector<NamedPredictions> models{{"base", pf.p}, {"model", pf.yhat}};
  const auto se = gini_split_standard_errors(pf.y, models, 20, 0.5, 1);
  EXPECT_FALSE(se[0][0].has_value());
  EXPECT_GT(*se[0][1], 0.0);
  EXPECT_LT(*se[0][1], 0.2);
  EXPECT_EQ(se, gini_split_standard_errors(pf.y, models, 20, 0.5, 1));
  EXPECT_THROW(gini_split_standard_errors(pf.y, models, 1), ConfigError);
}

TEST(PosteriorSummary, ConstantDraws) {
  const std::vector<double> d{1, 1, 1, 1};
  const auto s = posterior_summary(d, 10);
  EXPECT_EQ(s.mean, 1.0);
  EXPECT_EQ(s.variance, 0.0);
  ASSERT_EQ(s.histogram.counts.size(), 1u);
  EXPECT_EQ(s.histogram.counts[0], 4u);
}

TEST(PosteriorSummary, SmallSample) {
  const std::vector<double> d{1, 2, 3};
  const auto s = posterior_summary(d, 2);
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.variance, 1.0);
  EXPECT_DOUBLE_EQ(s.q50, 2.0);
  EXPECT_DOUBLE_EQ(s.q05, 1.1);
  EXPECT_DOUBLE_EQ(s.q95, 2.9);
  EXPECT_EQ(s.histogram.counts, (std::vector<std::size_t>{1, 2}));
  EXPECT_THROW(posterior_summary(std::vector<double>{1.0}), UsageError);
}

TEST(PosteriorSummary, HistogramPartitionsDraws) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  std::vector<double> d(1000);
  for (double& v : d) v = n01(rng);
  const auto s = posterior_summary(d, 17);
  ASSERT_EQ(s.histogram.edges.size(), 18u);
  std::size_t total = 0;
  for (auto c : s.histogram.counts) total += c;
  EXPECT_EQ(total, d.size());
  EXPECT_EQ(s.histogram.edges.front(), *std::min_element(d.begin(), d.end()));
  EXPECT_EQ(s.histogram.edges.back(), *std::max_element(d.begin(), d.end()));
}

TEST(RandomEffectBias, PerfectAndOffsetDraws) {
  const std::vector<double> truth{0.3, -0.2, 0.0};
  std::vector<std::vector<double>> perfect{{0.3, 0.3}, {-0.2, -0.2}, {0.0, 0.0}};
  auto r = random_effect_bias(perfect, truth);
  EXPECT_EQ(r.mean_abs, 0.0);
  EXPECT_EQ(r.max_abs, 0.0);

  auto shifted = perfect;
  for (auto& g : shifted)
    for (double& v : g) v += 0.25;
  r = random_effect_bias(shifted, truth);
  for (double b : r.per_group) EXPECT_NEAR(b, 0.25, 1e-15);
  EXPECT_NEAR(r.mean_abs, 0.25, 1e-15);

  EXPECT_THROW(random_effect_bias(perfect, std::vector<double>{0.1, 0.2}), ShapeError);
}
