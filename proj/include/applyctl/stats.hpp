#pragma once

// Paired statistics: exact McNemar, percentile bootstrap, Help-Hurt, ROC AUC,
// calibration (ECE / Brier / NLL), Platt scaling and the one-sided randomization
// test for target-hit localization. Everything here is a pure function; resampling
// takes an explicit seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "applyctl/error.hpp"
#include "applyctl/random.hpp"

namespace applyctl::stats {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Index-aligned outcomes of a reference policy (a) and a treatment (b).
class PairedComparison {
 public:
  PairedComparison(std::vector<bool> outcomes_a, std::vector<bool> outcomes_b)
      : a_(std::move(outcomes_a)), b_(std::move(outcomes_b)) {
    if (a_.size() != b_.size()) throw std::invalid_argument("paired outcome vectors differ in length");
    for (std::size_t i = 0; i < a_.size(); ++i) {
      if (!a_[i] && b_[i]) ++helps_;
      if (a_[i] && !b_[i]) ++hurts_;
    }
  }

  std::size_t n() const { return a_.size(); }
  std::int64_t helps() const { return helps_; }
  std::int64_t hurts() const { return hurts_; }
  std::int64_t help_hurt() const { return helps_ - hurts_; }
  double delta_acc() const { return n() == 0 ? 0.0 : static_cast<double>(help_hurt()) / static_cast<double>(n()); }
  const std::vector<bool>& outcomes_a() const { return a_; }
  const std::vector<bool>& outcomes_b() const { return b_; }

  // Per-row b - a in {-1, 0, +1}.
  std::vector<double> diffs() const {
    std::vector<double> d(n());
    for (std::size_t i = 0; i < n(); ++i) d[i] = static_cast<double>(b_[i]) - static_cast<double>(a_[i]);
    return d;
  }

 private:
  std::vector<bool> a_, b_;
  std::int64_t helps_ = 0;
  std::int64_t hurts_ = 0;
};

// P(X <= k) for X ~ Binomial(n, 1/2).
inline double binomial_half_cdf(std::int64_t k, std::int64_t n) {
  if (k < 0) return 0.0;
  if (k >= n) return 1.0;
  if (n <= 1000) {
    long double pmf = std::pow(0.5L, static_cast<long double>(n));
    long double acc = pmf;
    for (std::int64_t i = 0; i < k; ++i) {
      pmf = pmf * static_cast<long double>(n - i) / static_cast<long double>(i + 1);
      acc += pmf;
    }
    return static_cast<double>(std::min(acc, 1.0L));
  }
  // log-sum-exp for large n
  const double ln2 = std::log(2.0);
  std::vector<double> logs;
  logs.reserve(static_cast<std::size_t>(k + 1));
  for (std::int64_t i = 0; i <= k; ++i) {
    logs.push_back(std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(i) + 1) -
                   std::lgamma(static_cast<double>(n - i) + 1) - static_cast<double>(n) * ln2);
  }
  const double m = *std::max_element(logs.begin(), logs.end());
  double s = 0.0;
  for (double l : logs) s += std::exp(l - m);
  return std::min(1.0, std::exp(m + std::log(s)));
}

// Exact two-sided McNemar test on discordant counts.
inline double mcnemar_exact(std::int64_t helps, std::int64_t hurts) {
  if (helps < 0 || hurts < 0) throw std::invalid_argument("discordant counts must be nonnegative");
  const std::int64_t n = helps + hurts;
  if (n == 0) return 1.0;
  return std::min(1.0, 2.0 * binomial_half_cdf(std::min(helps, hurts), n));
}

// Linear-interpolation quantile of a sorted sample, q in [0, 1].
inline double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

struct BootstrapOptions {
  std::size_t resamples = 10000;
  double alpha = 0.05;
  std::uint64_t seed = 0;
};

// Percentile bootstrap interval for the mean of `diffs`.
inline Interval bootstrap_ci(std::span<const double> diffs, const BootstrapOptions& opt = {}) {
  if (diffs.empty()) throw std::invalid_argument("bootstrap of empty sample");
  if (opt.resamples < 1000) throw std::invalid_argument("bootstrap needs at least 1000 resamples");
  if (!(opt.alpha > 0.0 && opt.alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");

  const std::size_t n = diffs.size();
  const auto first = diffs.front();
  if (std::all_of(diffs.begin(), diffs.end(), [&](double d) { return d == first; })) {
    return {first, first};
  }

  std::mt19937_64 eng(opt.seed);
  std::vector<double> means(opt.resamples);
  for (auto& m : means) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < n; ++i) s += diffs[bounded_index(eng, n)];
    m = static_cast<double>(s / static_cast<long double>(n));
  }
  std::sort(means.begin(), means.end());
  return {sorted_quantile(means, opt.alpha / 2.0), sorted_quantile(means, 1.0 - opt.alpha / 2.0)};
}

// Mann-Whitney AUC: P(score of a positive > score of a negative), ties count 1/2.
inline double roc_auc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return scores[i] < scores[j]; });

  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]]) {
        rank_sum_pos += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedSignal("AUC needs both positive and negative examples");
  const double np = static_cast<double>(n_pos);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

struct CalibrationSet {
  std::vector<double> confidences;
  std::vector<bool> correct;
};

struct CalibrationMetrics {
  double ece = 0.0;
  double brier = 0.0;
  double nll = 0.0;
};

inline constexpr double kProbClamp = 1e-12;

inline std::size_t equal_width_bin(double c, std::size_t n_bins) {
  const auto b = static_cast<std::size_t>(std::floor(c * static_cast<double>(n_bins)));
  return std::min(b, n_bins - 1);
}

inline void validate(const CalibrationSet& set) {
  if (set.confidences.size() != set.correct.size()) throw std::invalid_argument("calibration vectors differ in length");
  if (set.confidences.empty()) throw std::invalid_argument("empty calibration set");
  for (double c : set.confidences) {
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("confidence outside [0,1]");
  }
}

inline CalibrationMetrics calibration_metrics(const CalibrationSet& set, std::size_t n_bins = 10) {
  validate(set);
  if (n_bins < 1) throw std::invalid_argument("need at least one bin");
  const std::size_t n = set.confidences.size();
  std::vector<double> conf_sum(n_bins, 0.0), hit_sum(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  CalibrationMetrics m;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = set.confidences[i];
    const double y = set.correct[i] ? 1.0 : 0.0;
    const auto b = equal_width_bin(c, n_bins);
    conf_sum[b] += c;
    hit_sum[b] += y;
    ++count[b];
    m.brier += (c - y) * (c - y);
    const double p = std::clamp(c, kProbClamp, 1.0 - kProbClamp);
    m.nll -= y * std::log(p) + (1.0 - y) * std::log1p(-p);
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double cb = static_cast<double>(count[b]);
    m.ece += (cb / static_cast<double>(n)) * std::abs(hit_sum[b] / cb - conf_sum[b] / cb);
  }
  m.brier /= static_cast<double>(n);
  m.nll /= static_cast<double>(n);
  return m;
}

struct PlattModel {
  double slope = 0.0;
  double intercept = 0.0;
  int iterations = 0;

  double predict(double confidence) const { return 1.0 / (1.0 + std::exp(-(slope * confidence + intercept))); }

  CalibrationSet apply(const CalibrationSet& set) const {
    CalibrationSet out{{}, set.correct};
    out.confidences.reserve(set.confidences.size());
    for (double c : set.confidences) out.confidences.push_back(predict(c));
    return out;
  }
};

namespace detail {
inline double logistic_nll(const CalibrationSet& s, double a, double b) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.confidences.size(); ++i) {
    const double z = a * s.confidences[i] + b;
    // log(1 + e^z) - y z, stable in both tails
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    total += softplus - (s.correct[i] ? z : 0.0);
  }
  return total / static_cast<double>(s.confidences.size());
}
}  // namespace detail

// One-dimensional logistic MLE by damped Newton; stops at gradient norm < tol.
inline PlattModel platt_fit(const CalibrationSet& fit, double tol = 1e-8, int max_iter = 500) {
  validate(fit);
  const auto pos = std::count(fit.correct.begin(), fit.correct.end(), true);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(fit.correct.size())) {
    throw UndefinedSignal("Platt fit needs both classes");
  }
  const double n = static_cast<double>(fit.confidences.size());
  double a = 0.0;
  double b = std::log(static_cast<double>(pos) / (n - static_cast<double>(pos)));
  double f = detail::logistic_nll(fit, a, b);

  for (int it = 0; it < max_iter; ++it) {
    double ga = 0, gb = 0, haa = 0, hab = 0, hbb = 0;
    for (std::size_t i = 0; i < fit.confidences.size(); ++i) {
      const double x = fit.confidences[i];
      const double p = 1.0 / (1.0 + std::exp(-(a * x + b)));
      const double r = p - (fit.correct[i] ? 1.0 : 0.0);
      const double w = p * (1.0 - p);
      ga += r * x;
      gb += r;
      haa += w * x * x;
      hab += w * x;
      hbb += w;
    }
    ga /= n;
    gb /= n;
    haa /= n;
    hab /= n;
    hbb /= n;
    if (std::hypot(ga, gb) < tol) return {a, b, it};

    const double det = haa * hbb - hab * hab;
    double da, db;
    if (det > 1e-300) {
      da = -(hbb * ga - hab * gb) / det;
      db = -(haa * gb - hab * ga) / det;
    } else {
      da = -ga;
      db = -gb;
    }
    double step = 1.0;
    bool improved = false;
    for (int h = 0; h < 60; ++h, step *= 0.5) {
      const double fa = detail::logistic_nll(fit, a + step * da, b + step * db);
      if (fa <= f) {
        a += step * da;
        b += step * db;
        f = fa;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  throw ConvergenceError("Platt fit did not reach the gradient tolerance");
}

struct RandomizationOptions {
  std::size_t permutations = 10000;
  std::uint64_t seed = 0;
};

namespace detail {
inline bool at_least(double value, double reference) {
  return value >= reference - 1e-12 * (1.0 + std::abs(reference));
}

inline double binomial_coefficient(std::size_t n, std::size_t k) {
  k = std::min(k, n - k);
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}
}  // namespace detail

// One-sided test that the hit group has a larger mean than the non-hit group.
// Statistic: mean(hit) - mean(non_hit). When the number of distinct group
// assignments is at most `permutations` they are enumerated exactly and the
// p-value is the fraction of assignments at least as extreme as the observed one
// (the observed assignment is among them). Otherwise Monte Carlo permutations with
// plus-one smoothing.
inline double randomization_interaction_test(std::span<const double> hit, std::span<const double> non_hit,
                                             const RandomizationOptions& opt = {}) {
  if (hit.empty() || non_hit.empty()) throw std::invalid_argument("randomization test needs two nonempty groups");
  const std::size_t k = hit.size();
  const std::size_t n = k + non_hit.size();
  std::vector<double> pooled(hit.begin(), hit.end());
  pooled.insert(pooled.end(), non_hit.begin(), non_hit.end());
  const double total = std::accumulate(pooled.begin(), pooled.end(), 0.0);
  const auto statistic = [&](double hit_sum) {
    return hit_sum / static_cast<double>(k) - (total - hit_sum) / static_cast<double>(n - k);
  };
  const double observed = statistic(std::accumulate(hit.begin(), hit.end(), 0.0));

  if (detail::binomial_coefficient(n, k) <= static_cast<double>(opt.permutations)) {
    std::vector<bool> mask(n, false);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(k), true);
    std::size_t extreme = 0, total_splits = 0;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask[i]) s += pooled[i];
      }
      if (detail::at_least(statistic(s), observed)) ++extreme;
      ++total_splits;
    } while (std::prev_permutation(mask.begin(), mask.end()));
    return static_cast<double>(extreme) / static_cast<double>(total_splits);
  }

  std::mt19937_64 eng(opt.seed);
  std::size_t extreme = 0;
  std::vector<double> work = pooled;
  for (std::size_t p = 0; p < opt.permutations; ++p) {
    // partial Fisher-Yates: the first k slots form the relabelled hit group
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = i + bounded_index(eng, n - i);
      std::swap(work[i], work[j]);
      s += work[i];
    }
    if (detail::at_least(statistic(s), observed)) ++extreme;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(opt.permutations + 1);
}

// Nearest-rank percentile, p in [0, 100]; p = 0 returns the minimum.
inline double nearest_rank_percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of empty sample");
  if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile outside [0,100]");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size())));
  return values[rank == 0 ? 0 : rank - 1];
}

}  // namespace applyctl::stats
