#pragma once

// Class-conditional Beta confidence model. Correct events draw from Beta(a, b) and
// incorrect ones from the mirror Beta(b, a), with a + b fixed; `a` is solved so
// that P(conf_correct > conf_incorrect) equals a target AUC.

#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <utility>

namespace applyctl {

struct BetaPair {
  double a = 1.0;
  double b = 1.0;
};

class ConfidenceModel {
 public:
  ConfidenceModel() = default;

  static ConfidenceModel for_auc(double target_auc, double concentration = 6.0) {
    if (!(target_auc > 0.0 && target_auc < 1.0)) throw std::invalid_argument("target AUC must lie in (0,1)");
    if (!(concentration > 0.0)) throw std::invalid_argument("concentration must be positive");
    static std::mutex mu;
    static std::map<std::pair<double, double>, double> cache;
    std::lock_guard lock(mu);
    auto key = std::make_pair(target_auc, concentration);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, solve(target_auc, concentration)).first;
    ConfidenceModel m;
    m.correct_ = {it->second, concentration - it->second};
    m.incorrect_ = {concentration - it->second, it->second};
    m.target_auc_ = target_auc;
    return m;
  }

  // u in (0,1) -> confidence quantile of the class-conditional distribution.
  double sample(bool correct, double u) const {
    const auto& p = correct ? correct_ : incorrect_;
    return boost::math::ibeta_inv(p.a, p.b, u);
  }

  const BetaPair& correct_params() const { return correct_; }
  const BetaPair& incorrect_params() const { return incorrect_; }
  double target_auc() const { return target_auc_; }

  // AUC of Beta(a, c-a) against its mirror: P(X + X' > 1) for X, X' iid Beta(a, c-a).
  static double auc_of(double a, double concentration) {
    const double b = concentration - a;
    constexpr int kNodes = 400;
    double s = 0.0;
    for (int i = 0; i < kNodes; ++i) {
      const double u = (i + 0.5) / kNodes;
      const double x = boost::math::ibeta_inv(a, b, u);
      s += 1.0 - boost::math::ibeta(a, b, 1.0 - x);
    }
    return s / kNodes;
  }

 private:
  static double solve(double target, double c) {
    double lo = 1e-3, hi = c - 1e-3;
    for (int it = 0; it < 60 && hi - lo > 1e-10; ++it) {
      const double mid = 0.5 * (lo + hi);
      (auc_of(mid, c) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }

  BetaPair correct_{3.0, 3.0};
  BetaPair incorrect_{3.0, 3.0};
  double target_auc_ = 0.5;
};

}  // namespace applyctl
