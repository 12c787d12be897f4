#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "tweedie_avb/autodiff.hpp"

using namespace tweedie_avb;
using namespace tweedie_avb::ad;

namespace {

using Unary = std::function<Var(Var)>;

double central(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

}  // namespace

TEST(Primitives, ClosedFormValues) {
  Tape t;
  EXPECT_DOUBLE_EQ(sigmoid(t.variable(0.0)).value(), 0.5);
  Var x = t.variable(0.0);
  Var sp = softplus(x);
  EXPECT_NEAR(sp.value(), std::log(2.0), 1e-15);
  t.backward(sp);
  EXPECT_DOUBLE_EQ(t.gradient(x), 0.5);

  Tape t2;
  std::vector<Var> xs{t2.variable(0.0), t2.variable(0.0)};
  Var l = log_sum_exp(xs);
  EXPECT_NEAR(l.value(), std::log(2.0), 1e-15);
  t2.backward(l);
  EXPECT_DOUBLE_EQ(t2.gradient(xs[0]), 0.5);
  EXPECT_DOUBLE_EQ(t2.gradient(xs[1]), 0.5);
}

TEST(Backward, BasicDerivatives) {
  {
    Tape t;
    Var x = t.variable(3.0);
    t.backward(x * x);
    EXPECT_DOUBLE_EQ(t.gradient(x), 6.0);
  }
  {
    Tape t;
    Var x = t.variable(0.0);
    t.backward(sigmoid(x));
    EXPECT_DOUBLE_EQ(t.gradient(x), 0.25);
  }
  {
    Tape t;
    Var x = t.variable(7.0);
    t.backward(exp(log(x)));
    EXPECT_NEAR(t.gradient(x), 1.0, 1e-14);
  }
}

TEST(Backward, GradientZeroBeforeSweep) {
  Tape t;
  Var x = t.variable(2.0);
  Var y = x * x + exp(x);
  EXPECT_EQ(t.gradient(x), 0.0);
  EXPECT_EQ(t.gradient(y), 0.0);
}

TEST(Backward, UsageErrors) {
  Tape t;
  Var x = t.variable(1.0);
  Var y = x * 2.0;
  t.backward(y);
  EXPECT_THROW(t.backward(y), UsageError);
  EXPECT_THROW(x * 3.0, UsageError);  // recording after backward
  t.reset();
  EXPECT_THROW(t.gradient(x), UsageError);  // stale handle
  Tape other;
  Var z = other.variable(1.0);
  Var w = t.variable(1.0);
  EXPECT_THROW(z + w, UsageError);
  EXPECT_THROW(t.backward(z), UsageError);
}

TEST(Primitives, DomainErrorsInsteadOfNaN) {
  Tape t;
  EXPECT_THROW(log(t.variable(0.0)), DomainError);
  EXPECT_THROW(log(t.variable(-1.0)), DomainError);
  EXPECT_THROW(log_gamma(t.variable(0.0)), DomainError);
  EXPECT_THROW(pow(t.variable(-2.0), 0.5), DomainError);
  EXPECT_THROW(t.variable(1.0) / t.variable(0.0), DomainError);
}

TEST(Primitives, PartialsMatchCentralDifferences) {
  struct Case {
    const char* name;
    Unary f;
    std::function<double(double)> g;
    double lo, hi;
  };
  const std::vector<Case> cases = {
      {"exp", [](Var x) { return exp(x); }, [](double x) { return std::exp(x); }, -3, 3},
      {"log", [](Var x) { return log(x); }, [](double x) { return std::log(x); }, 0.1, 10},
      {"tanh", [](Var x) { return tanh(x); }, [](double x) { return std::tanh(x); }, -3, 3},
      {"sigmoid", [](Var x) { return sigmoid(x); }, [](double x) { return tweedie_avb::sigmoid(x); }, -6, 6},
      {"softplus", [](Var x) { return softplus(x); }, [](double x) { return tweedie_avb::softplus(x); }, -6, 6},
      {"pow", [](Var x) { return pow(x, 2.7); }, [](double x) { return std::pow(x, 2.7); }, 0.1, 4},
      {"log_gamma", [](Var x) { return log_gamma(x); }, [](double x) { return tweedie_avb::log_gamma(x); }, 0.05, 30},
      {"neg", [](Var x) { return -x; }, [](double x) { return -x; }, -5, 5},
      {"div_const_num", [](Var x) { return 3.0 / x; }, [](double x) { return 3.0 / x; }, 0.2, 5},
  };
  std::mt19937_64 rng(3);
  for (const auto& c : cases) {
    std::uniform_real_distribution<double> u(c.lo, c.hi);
    for (int k = 0; k < 100; ++k) {
      const double x0 = u(rng);
      Tape t;
      Var x = t.variable(x0);
      Var y = c.f(x);
      EXPECT_NEAR(y.value(), c.g(x0), 1e-12 * std::max(1.0, std::abs(c.g(x0)))) << c.name;
      t.backward(y);
      const double h = 1e-5 * std::max(1.0, std::abs(x0));
      const double fd = central(c.g, x0, h);
      EXPECT_LT(std::abs(t.gradient(x) - fd) / std::max(1.0, std::abs(fd)), 1e-6)
          << c.name << " at " << x0;
    }
  }
}

TEST(Primitives, BinaryAndListPartialsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  auto f = [](Tape& t, std::span<const Var> x) {
    std::vector<Var> terms{x[0] * x[1], x[0] / x[2], x[1] - x[3], x[2] + x[3]};
    Var lse = log_sum_exp(terms);
    std::vector<Var> w{x[0], x[1]};
    std::vector<Var> in{x[2], x[3]};
    Var aff = affine(w, in, x[4]);
    std::vector<double> consts{0.5, -1.5};
    Var aff2 = affine(w, std::span<const double>(consts), x[3]);
    std::vector<Var> parts{lse, aff, aff2, x[4] * x[4]};
    (void)t;
    return sum(parts);
  };
  for (int k = 0; k < 100; ++k) {
    std::vector<double> p(5);
    for (double& v : p) v = u(rng);
    const auto report = finite_diff_check(f, std::span<const double>(p), 1e-6);
    EXPECT_LT(report.max_relative_error, 1e-6);
    EXPECT_TRUE(report.non_finite.empty());
  }
}

TEST(Backward, IsLinear) {
  // grad(a f + b g) = a grad f + b grad g
  auto f = [](Tape& t, std::span<const Var> x) {
    (void)t;
    return exp(x[0]) * tanh(x[1]) + log_gamma(x[2]);
  };
  auto g = [](Tape& t, std::span<const Var> x) {
    (void)t;
    return sigmoid(x[0] * x[2]) - softplus(x[1]);
  };
  const std::vector<double> p{0.3, -0.7, 2.2};
  const double a = 1.7, b = -0.4;
  auto grad = [&](auto&& fn) {
    Tape t;
    std::vector<Var> x;
    for (double v : p) x.push_back(t.variable(v));
    Var out = fn(t, std::span<const Var>(x));
    t.backward(out);
    return gradients(t, x);
  };
  const auto gf = grad(f);
  const auto gg = grad(g);
  const auto gc = grad([&](Tape& t, std::span<const Var> x) { return a * f(t, x) + b * g(t, x); });
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-10);
  }
}

TEST(Backward, DeterministicBitIdentical) {
  auto run = [] {
    Tape t;
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    std::vector<Var> x;
    for (int i = 0; i < 50; ++i) x.push_back(t.variable(n(rng)));
    std::vector<Var> terms;
    for (int i = 0; i + 1 < 50; ++i) terms.push_back(tanh(x[i] * x[i + 1]) + softplus(x[i]));
    Var out = log_sum_exp(terms);
    t.backward(out);
    auto g = gradients(t, x);
    g.push_back(out.value());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Detach, CutsGradientPath) {
  Tape t;
  Var x = t.variable(2.0);
  Var y = detach(x) * x;
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.gradient(x), 2.0);
}

// --- ParamStore / Adam ------------------------------------------------------

TEST(ParamStore, BlocksAreDisjointAndNamed) {
  ParamStore s;
  s.add("a", 3, 1.0);
  s.add("b", 2, 2.0);
  EXPECT_EQ(s.size(), 5u);
  EXPECT_EQ(s.slot("a").offset, 0u);
  EXPECT_EQ(s.slot("b").offset, 3u);
  EXPECT_EQ(s.block("b")[1], 2.0);
  EXPECT_EQ(s.coordinate_name(4), "b[1]");
  EXPECT_THROW(s.slot("missing"), UsageError);
  EXPECT_THROW(s.add("a", 1), UsageError);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  ParamStore s;
  s.add("w", 3, 0.5);
  AdamState st(3, {});
  const std::vector<double> g(3, 0.0);
  adam_step(s, g, st);
  EXPECT_EQ(st.step_count, 1);
  for (double v : s.values()) EXPECT_EQ(v, 0.5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore s;
  s.add("w", 1, 0.0);
  AdamState st(1, {});
  adam_step(s, std::vector<double>{1.0}, st);
  EXPECT_NEAR(s.values()[0], -1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, CoordinatesUpdateIndependently) {
  ParamStore a, b;
  a.add("w", 2, 0.0);
  b.add("w", 2, 0.0);
  AdamState sa(2, {}), sb(2, {});
  for (int k = 0; k < 5; ++k) {
    const double g0 = 0.3 * k - 1.0, g1 = 2.0 + k;
    adam_step(a, std::vector<double>{g0, g1}, sa);
    adam_step(b, std::vector<double>{g1, g0}, sb);
  }
  EXPECT_EQ(a.values()[0], b.values()[1]);
  EXPECT_EQ(a.values()[1], b.values()[0]);
}

TEST(Adam, RejectsNonFiniteGradientWithDiagnostic) {
  ParamStore s;
  s.add("w", 2, 1.0);
  s.add("critic.bias", 1, 0.0);
  AdamState st(3, {});
  try {
    adam_step(s, std::vector<double>{0.1, 0.2, std::nan("")}, st);
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter(), "critic.bias[0]");
    EXPECT_TRUE(std::isnan(e.value()));
  }
  EXPECT_EQ(st.step_count, 0);
  EXPECT_EQ(s.values()[0], 1.0);
}

TEST(Adam, ClipsByGlobalNorm) {
  ParamStore clipped, scaled;
  clipped.add("w", 2, 0.0);
  scaled.add("w", 2, 0.0);
  AdamState s1(2, {}), s2(2, {});
  s2.clip_norm = 0.0;
  // Norm 50 is clipped to 10, i.e. the same direction as (6, 8).
  adam_step(clipped, std::vector<double>{30.0, 40.0}, s1);
  adam_step(scaled, std::vector<double>{6.0, 8.0}, s2);
  EXPECT_NEAR(clipped.values()[0], scaled.values()[0], 1e-15);
  EXPECT_NEAR(s1.first_moment[1], 0.1 * 8.0, 1e-12);
}

TEST(FiniteDiffCheck, SumOfSquaresIsExact) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  ParamStore s;
  auto v = s.add("x", 10);
  for (double& x : v) x = n(rng);
  auto f = [](Tape& t, std::span<const Var> x) {
    std::vector<Var> sq;
    for (const Var& xi : x) sq.push_back(xi * xi);
    (void)t;
    return sum(sq);
  };
  EXPECT_LT(finite_diff_check(f, s, 1e-4).max_relative_error, 1e-8);
}

TEST(FiniteDiffCheck, RejectsStepOutsideRangeAndReportsNonFinite) {
  auto f = [](Tape& t, std::span<const Var> x) {
    (void)t;
    return x[0] * x[0];
  };
  const std::vector<double> p{1.0};
  EXPECT_THROW(finite_diff_check(f, std::span<const double>(p), 1e-2), ConfigError);
  EXPECT_THROW(finite_diff_check(f, std::span<const double>(p), 1e-9), ConfigError);
  auto g = [](Tape& t, std::span<const Var> x) {
    (void)t;
    return x[0] * (1.0 / x[1]) * 0.0 + exp(x[1] * 800.0);
  };
  const std::vector<double> q{1.0, 0.8868};
  const auto report = finite_diff_check(g, std::span<const double>(q), 1e-3);
  EXPECT_FALSE(report.non_finite.empty());
}
