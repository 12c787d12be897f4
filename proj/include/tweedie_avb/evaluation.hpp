#pragma once

// Ordered Lorenz curves, Gini indices and posterior summaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tweedie_avb/avb.hpp"
#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/statistics.hpp"

namespace tweedie_avb {

struct LorenzPoint {
  double share_baseline;  ///< F_p
  double share_outcome;   ///< F_y
};

struct LorenzCurve {
  std::vector<LorenzPoint> points;
};

/// Rows sorted by relativity r_i = yhat_i / p_i; one point per distinct
/// relativity, so
///   F_p(r) = sum_i p_i 1(r_i <= r) / sum_i p_i,  F_y(r) likewise with y,
/// preceded by (0, 0). When sum y = 0 the outcome share follows F_p.
inline LorenzCurve ordered_lorenz(std::span<const double> y, std::span<const double> baseline,
                                  std::span<const double> prediction) {
  const std::size_t n = y.size();
  if (n == 0) throw ShapeError("ordered Lorenz curve needs at least one row");
  if (baseline.size() != n || prediction.size() != n) {
    throw ShapeError("outcome, baseline and prediction lengths differ");
  }
  double sum_y = 0.0, sum_p = 0.0, sum_hat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(baseline[i] > 0.0) || !std::isfinite(baseline[i])) {
      throw DomainError("baseline prediction at row " + std::to_string(i) + " is not positive");
    }
    if (!(prediction[i] >= 0.0) || !std::isfinite(prediction[i])) {
      throw DomainError("prediction at row " + std::to_string(i) + " is negative or non-finite");
    }
    if (!(y[i] >= 0.0) || !std::isfinite(y[i])) {
      throw DomainError("outcome at row " + std::to_string(i) + " is negative or non-finite");
    }
    sum_y += y[i];
    sum_p += baseline[i];
    sum_hat += prediction[i];
  }
  if (sum_hat == 0.0 && sum_y > 0.0) {
    throw DegeneratePrediction("all predictions are zero while outcomes are positive");
  }

  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = prediction[i] / baseline[i];
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r[a] < r[b]; });

  LorenzCurve curve;
  curve.points.push_back({0.0, 0.0});
  double cp = 0.0, cy = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    cp += baseline[i];
    cy += y[i];
    if (k + 1 < n && r[order[k + 1]] == r[i]) continue;
    const double fp = k + 1 == n ? 1.0 : cp / sum_p;
    double fy = sum_y > 0.0 ? cy / sum_y : fp;
    if (k + 1 == n) fy = 1.0;
    curve.points.push_back({fp, fy});
  }
  return curve;
}

/// 1 - 2 * trapezoid area under the curve: positive when the curve lies
/// below the diagonal.
inline double gini_index(const LorenzCurve& curve) {
  double area = 0.0;
  for (std::size_t k = 1; k < curve.points.size(); ++k) {
    const auto& a = curve.points[k - 1];
    const auto& b = curve.points[k];
    area += 0.5 * (b.share_baseline - a.share_baseline) * (a.share_outcome + b.share_outcome);
  }
  return 1.0 - 2.0 * area;
}

inline double gini_index(std::span<const double> y, std::span<const double> baseline,
                         std::span<const double> prediction) {
  return gini_index(ordered_lorenz(y, baseline, prediction));
}

struct NamedPredictions {
  std::string name;
  std::vector<double> values;
};

struct GiniReport {
  double gini = 0.0;
  std::string baseline_name;
  std::string model_name;
  std::optional<double> standard_error;
};

/// entries[i][j] = Gini of model j against baseline i; the diagonal is empty.
struct GiniMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<std::optional<double>>> entries;
  std::vector<std::vector<std::optional<double>>> standard_errors;

  std::vector<GiniReport> reports() const {
    std::vector<GiniReport> out;
    for (std::size_t i = 0; i < names.size(); ++i) {
      for (std::size_t j = 0; j < names.size(); ++j) {
        if (!entries[i][j]) continue;
        GiniReport r{*entries[i][j], names[i], names[j], std::nullopt};
        if (!standard_errors.empty()) r.standard_error = standard_errors[i][j];
        out.push_back(r);
      }
    }
    return out;
  }
};

namespace detail {

template <class F>
auto with_pair_context(std::size_t i, std::size_t j, const std::vector<NamedPredictions>& models, F&& f) {
  const std::string ctx = "baseline '" + models[i].name + "', model '" + models[j].name + "': ";
  try {
    return f();
  } catch (const DomainError& e) {
    throw DomainError(ctx + e.what());
  } catch (const DegeneratePrediction& e) {
    throw DegeneratePrediction(ctx + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(ctx + e.what());
  }
}

inline void check_models(const std::vector<NamedPredictions>& models) {
  if (models.size() < 2) throw UsageError("pairwise Gini comparison needs at least two models");
}

}  // namespace detail

inline GiniMatrix pairwise_gini_matrix(std::span<const double> y, const std::vector<NamedPredictions>& models) {
  detail::check_models(models);
  const std::size_t k = models.size();
  GiniMatrix m;
  for (const auto& model : models) m.names.push_back(model.name);
  m.entries.assign(k, std::vector<std::optional<double>>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      m.entries[i][j] = detail::with_pair_context(
          i, j, models, [&] { return gini_index(y, models[i].values, models[j].values); });
    }
  }
  return m;
}

/// Sample standard deviation of each pairwise Gini over `splits` random
/// subsets holding `fraction` of the rows.
inline std::vector<std::vector<std::optional<double>>> gini_split_standard_errors(
    std::span<const double> y, const std::vector<NamedPredictions>& models, std::size_t splits = 20,
    double fraction = 0.5, std::uint64_t seed = 0) {
  detail::check_models(models);
  if (splits < 2) throw ConfigError("standard errors need at least two splits");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("split fraction must lie in (0, 1]");
  const std::size_t n = y.size();
  const auto take = static_cast<std::size_t>(std::nearbyint(fraction * static_cast<double>(n)));
  if (take == 0) throw ConfigError("split fraction leaves no rows");
  const std::size_t k = models.size();
  std::vector<std::vector<std::vector<double>>> values(k, std::vector<std::vector<double>>(k));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t s = 0; s < splits; ++s) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<double> ys(take);
    std::vector<std::vector<double>> preds(k, std::vector<double>(take));
    for (std::size_t t = 0; t < take; ++t) {
      ys[t] = y[idx[t]];
      for (std::size_t m = 0; m < k; ++m) preds[m][t] = models[m].values.at(idx[t]);
    }
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        if (i == j) continue;
        values[i][j].push_back(
            detail::with_pair_context(i, j, models, [&] { return gini_index(ys, preds[i], preds[j]); }));
      }
    }
  }
  std::vector<std::vector<std::optional<double>>> se(k, std::vector<std::optional<double>>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i != j) se[i][j] = std::sqrt(stats::variance(values[i][j]));
    }
  }
  return se;
}

// --- posterior summaries --------------------------------------------------------

struct Histogram {
  std::vector<double> edges;  ///< bins + 1 boundaries
  std::vector<std::size_t> counts;
};

struct PosteriorSummary {
  double mean = 0.0;
  double variance = 0.0;  ///< n - 1 denominator
  Histogram histogram;
  double q05 = 0.0;
  double q50 = 0.0;
  double q95 = 0.0;
};

/// Equal-width bins over [min, max], last bin closed. Constant input gives a
/// single bin holding every draw.
inline Histogram histogram(std::span<const double> draws, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  if (draws.empty()) throw UsageError("histogram of an empty sample");
  const auto [lo_it, hi_it] = std::minmax_element(draws.begin(), draws.end());
  const double lo = *lo_it, hi = *hi_it;
  Histogram h;
  if (!(hi > lo)) {
    h.edges = {lo, hi};
    h.counts = {draws.size()};
    return h;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + width * static_cast<double>(b));
  h.counts.assign(bins, 0);
  for (double v : draws) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

inline PosteriorSummary posterior_summary(std::span<const double> draws, std::size_t bins = 30) {
  if (draws.size() < 2) throw UsageError("posterior summary needs at least two draws");
  for (double v : draws) {
    if (!std::isfinite(v)) throw DomainError("non-finite posterior draw");
  }
  PosteriorSummary s;
  s.mean = stats::mean(draws);
  s.variance = stats::variance(draws);
  s.histogram = histogram(draws, bins);
  std::vector<double> sorted(draws.begin(), draws.end());
  std::sort(sorted.begin(), sorted.end());
  s.q05 = stats::quantile_sorted(sorted, 0.05);
  s.q50 = stats::quantile_sorted(sorted, 0.50);
  s.q95 = stats::quantile_sorted(sorted, 0.95);
  return s;
}

// --- random-effect bias ---------------------------------------------------------

struct RandomEffectBias {
  std::vector<double> per_group;
  double mean_abs = 0.0;
  double max_abs = 0.0;
};

/// bias_g = mean(draws[g]) - truth[g].
inline RandomEffectBias random_effect_bias(const std::vector<std::vector<double>>& draws_per_group,
                                           std::span<const double> truth) {
  if (draws_per_group.size() != truth.size()) {
    throw ShapeError("posterior has " + std::to_string(draws_per_group.size()) + " groups, truth has " +
                     std::to_string(truth.size()));
  }
  if (truth.empty()) throw ShapeError("no groups to compare");
  RandomEffectBias r;
  for (std::size_t g = 0; g < truth.size(); ++g) {
    const double bias = stats::mean(draws_per_group[g]) - truth[g];
    r.per_group.push_back(bias);
    r.mean_abs += std::abs(bias);
    r.max_abs = std::max(r.max_abs, std::abs(bias));
  }
  r.mean_abs /= static_cast<double>(truth.size());
  return r;
}

inline RandomEffectBias random_effect_bias(const FitResult& fit, std::span<const double> truth) {
  std::vector<std::vector<double>> per_group;
  for (int g = 0; g < fit.group_count; ++g) per_group.push_back(fit.random_effect_draws(static_cast<std::size_t>(g)));
  return random_effect_bias(per_group, truth);
}

}  // namespace tweedie_avb
