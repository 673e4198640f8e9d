///
/// \file stats.hpp
/// \brief Agreement metrics and the normality-gated paired significance tests.
///
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "lupi/common.hpp"

namespace lupi {

inline double mean(std::span<const double> x) {
  if (x.empty()) throw EmptyDatasetError("mean of an empty series");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Population moments of a pair of series.
struct PairMoments {
  double mean_x = 0, mean_y = 0, var_x = 0, var_y = 0, cov = 0;
};

inline PairMoments pair_moments(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("series lengths differ");
  if (x.size() < 2) throw EmptyDatasetError("correlation needs at least two points");
  PairMoments m;
  m.mean_x = mean(x);
  m.mean_y = mean(y);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - m.mean_x, dy = y[i] - m.mean_y;
    m.var_x += dx * dx;
    m.var_y += dy * dy;
    m.cov += dx * dy;
  }
  const auto n = static_cast<double>(x.size());
  m.var_x /= n;
  m.var_y /= n;
  m.cov /= n;
  return m;
}

/// Pearson correlation; nullopt when either series is constant.
inline std::optional<double> pcc(std::span<const double> x, std::span<const double> y) {
  const auto m = pair_moments(x, y);
  if (m.var_x <= 0.0 || m.var_y <= 0.0) return std::nullopt;
  return std::clamp(m.cov / std::sqrt(m.var_x * m.var_y), -1.0, 1.0);
}

/// Lin's concordance correlation. Two identical constant series agree
/// perfectly (1); any other constant series leaves it undefined.
inline std::optional<double> ccc(std::span<const double> x, std::span<const double> y) {
  const auto m = pair_moments(x, y);
  const double gap = m.mean_x - m.mean_y;
  if (m.var_x <= 0.0 || m.var_y <= 0.0) {
    if (m.var_x <= 0.0 && m.var_y <= 0.0 && gap == 0.0) return 1.0;
    return std::nullopt;
  }
  return 2.0 * m.cov / (m.var_x + m.var_y + gap * gap);
}

inline double sample_stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

/// Normal-approximation 95% half-width of the mean.
inline double ci95_half_width(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  return 1.959963984540054 * sample_stddev(x) / std::sqrt(static_cast<double>(x.size()));
}

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// ---------------------------------------------------------------------------
// D'Agostino-Pearson omnibus normality test.

struct NormalityResult {
  double statistic = 0.0;  // K^2
  double p_value = 0.0;
  double z_skew = 0.0;
  double z_kurtosis = 0.0;
  bool degenerate = false;
};

/// Skewness z-score (D'Agostino transformation); requires n >= 8.
inline double skewness_z(std::span<const double> x) {
  const auto n = static_cast<double>(x.size());
  const double m = mean(x);
  double m2 = 0, m3 = 0;
  for (double v : x) {
    const double d = v - m;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  const double b2 = m3 / std::pow(m2, 1.5);
  double y = b2 * std::sqrt(((n + 1) * (n + 3)) / (6.0 * (n - 2)));
  const double beta2 =
      3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3) / ((n - 2.0) * (n + 5) * (n + 7) * (n + 9));
  const double w2 = -1.0 + std::sqrt(2.0 * (beta2 - 1.0));
  const double delta = 1.0 / std::sqrt(0.5 * std::log(w2));
  const double alpha = std::sqrt(2.0 / (w2 - 1.0));
  if (y == 0.0) y = 1.0;
  return delta * std::log(y / alpha + std::sqrt((y / alpha) * (y / alpha) + 1.0));
}

/// Kurtosis z-score (Anscombe-Glynn transformation); requires n >= 5.
inline double kurtosis_z(std::span<const double> x) {
  const auto n = static_cast<double>(x.size());
  const double m = mean(x);
  double m2 = 0, m4 = 0;
  for (double v : x) {
    const double d = v - m;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m4 /= n;
  const double b2 = m4 / (m2 * m2);
  const double e = 3.0 * (n - 1) / (n + 1);
  const double varb2 = 24.0 * n * (n - 2) * (n - 3) / ((n + 1) * (n + 1) * (n + 3) * (n + 5));
  const double xs = (b2 - e) / std::sqrt(varb2);
  const double sqrtbeta1 =
      6.0 * (n * n - 5 * n + 2) / ((n + 7) * (n + 9)) * std::sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2) * (n - 3)));
  const double a = 6.0 + 8.0 / sqrtbeta1 * (2.0 / sqrtbeta1 + std::sqrt(1.0 + 4.0 / (sqrtbeta1 * sqrtbeta1)));
  const double term1 = 1.0 - 2.0 / (9.0 * a);
  const double denom = 1.0 + xs * std::sqrt(2.0 / (a - 4.0));
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double term2 = (denom > 0 ? 1.0 : -1.0) * std::cbrt((1.0 - 2.0 / a) / std::abs(denom));
  return (term1 - term2) / std::sqrt(2.0 / (9.0 * a));
}

/// K^2 = z_skew^2 + z_kurt^2, p from chi-square(2): exp(-K^2 / 2).
/// Zero-variance input is degenerate and rejected by convention (p = 0).
inline NormalityResult dagostino_pearson(std::span<const double> x) {
  if (x.size() < 8) throw ConfigError("D'Agostino-Pearson test needs at least 8 values");
  NormalityResult r;
  const double m = mean(x);
  const bool constant = std::all_of(x.begin(), x.end(), [&](double v) { return v == m; });
  if (constant || sample_stddev(x) == 0.0) {
    r.degenerate = true;
    r.statistic = std::numeric_limits<double>::infinity();
    r.p_value = 0.0;
    return r;
  }
  r.z_skew = skewness_z(x);
  r.z_kurtosis = kurtosis_z(x);
  r.statistic = r.z_skew * r.z_skew + r.z_kurtosis * r.z_kurtosis;
  r.p_value = std::isfinite(r.statistic) ? std::exp(-0.5 * r.statistic) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// One-tailed paired tests, alternative: a > b.

/// Paired t-test on diffs; p = P(T_{n-1} >= t).
inline double paired_t_pvalue(std::span<const double> diffs, double* t_out = nullptr) {
  const auto n = diffs.size();
  if (n < 2) throw ConfigError("paired t-test needs at least two pairs");
  const double m = mean(diffs);
  const double sd = sample_stddev(diffs);
  if (sd == 0.0) {
    if (t_out) *t_out = m > 0 ? INFINITY : (m < 0 ? -INFINITY : 0.0);
    return m > 0 ? 0.0 : (m < 0 ? 1.0 : 0.5);
  }
  const double t = m / (sd / std::sqrt(static_cast<double>(n)));
  if (t_out) *t_out = t;
  boost::math::students_t dist(static_cast<double>(n - 1));
  return boost::math::cdf(boost::math::complement(dist, t));
}

struct WilcoxonResult {
  double w_plus = 0.0;
  std::size_t n_nonzero = 0;
  double p_value = 1.0;
  bool exact = true;
};

/// Average ranks of |d| (ties share their mean rank).
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline constexpr std::size_t kWilcoxonExactMax = 25;

/// Signed-rank test. Zero differences are dropped. Up to 25 non-zero pairs
/// the null distribution of W+ is enumerated exactly (conditional on the
/// observed, possibly tied, ranks); beyond that a tie-corrected normal
/// approximation is used.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> diffs) {
  std::vector<double> nz;
  for (double d : diffs)
    if (d != 0.0) nz.push_back(d);
  WilcoxonResult r;
  r.n_nonzero = nz.size();
  if (nz.empty()) return r;
  std::vector<double> mags(nz.size());
  std::transform(nz.begin(), nz.end(), mags.begin(), [](double d) { return std::abs(d); });
  const auto ranks = average_ranks(mags);
  for (std::size_t i = 0; i < nz.size(); ++i)
    if (nz[i] > 0) r.w_plus += ranks[i];

  const auto n = static_cast<double>(nz.size());
  if (nz.size() <= kWilcoxonExactMax) {
    // Ranks are multiples of 1/2, so doubled ranks are integers.
    std::vector<int> twice(ranks.size());
    int total = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i) total += (twice[i] = static_cast<int>(std::lround(2.0 * ranks[i])));
    std::vector<double> ways(static_cast<std::size_t>(total) + 1, 0.0);
    ways[0] = 1.0;
    int reach = 0;
    for (int w : twice) {
      for (int s = reach; s >= 0; --s)
        if (ways[static_cast<std::size_t>(s)] != 0.0) ways[static_cast<std::size_t>(s + w)] += ways[static_cast<std::size_t>(s)];
      reach += w;
    }
    const auto observed = static_cast<int>(std::lround(2.0 * r.w_plus));
    double tail = 0.0;
    for (int s = observed; s <= total; ++s) tail += ways[static_cast<std::size_t>(s)];
    r.p_value = tail / std::ldexp(1.0, static_cast<int>(nz.size()));
    r.exact = true;
    return r;
  }
  double tie_term = 0.0;
  std::vector<double> sorted = mags;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const auto t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  const double mu = n * (n + 1) / 4.0;
  const double var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0;
  r.p_value = var > 0 ? normal_sf((r.w_plus - mu) / std::sqrt(var)) : 0.5;
  r.exact = false;
  return r;
}

}  // namespace lupi
