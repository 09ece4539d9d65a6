#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "diffpath/error.hpp"

namespace diffpath {

struct RankSumResult {
  double u = 0.0;          // U statistic of the positive sample, ties counted as 1/2
  double auroc = 0.0;      // u / (n_negative * n_positive)
  double z = 0.0;          // tie-corrected normal approximation
  double p_greater = 1.0;  // one-sided p-value for "positives rank higher"
};

/// Mann-Whitney rank-sum test of `positive` against `negative` with mid-rank
/// tie handling. Higher values count as "more positive".
inline RankSumResult rank_sum_test(std::span<const double> negative, std::span<const double> positive) {
  if (negative.empty() || positive.empty()) throw InvalidArgument("rank-sum test needs two non-empty samples");
  const std::size_t n0 = negative.size();
  const std::size_t n1 = positive.size();
  const std::size_t n = n0 + n1;

  std::vector<std::pair<double, bool>> all;
  all.reserve(n);
  for (double v : negative) {
    if (!std::isfinite(v)) throw InvalidArgument("scores must be finite");
    all.emplace_back(v, false);
  }
  for (double v : positive) {
    if (!std::isfinite(v)) throw InvalidArgument("scores must be finite");
    all.emplace_back(v, true);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  // Twice the rank sum keeps mid-ranks integral.
  long double twice_rank_sum = 0;
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const auto twice_mid = static_cast<long double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].second) twice_rank_sum += twice_mid;
    }
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  RankSumResult r;
  const long double twice_u = twice_rank_sum - static_cast<long double>(n1) * static_cast<long double>(n1 + 1);
  r.u = static_cast<double>(twice_u / 2);
  r.auroc = r.u / (static_cast<double>(n0) * static_cast<double>(n1));

  const double mean_u = static_cast<double>(n0) * static_cast<double>(n1) / 2.0;
  const double var_u = static_cast<double>(n0) * static_cast<double>(n1) / 12.0 *
                       (static_cast<double>(n + 1) - tie_term / (static_cast<double>(n) * static_cast<double>(n - 1)));
  if (var_u > 0.0) {
    r.z = (r.u - mean_u) / std::sqrt(var_u);
    r.p_greater = 0.5 * std::erfc(r.z / std::sqrt(2.0));
  }
  return r;
}

/// Area under the ROC curve with OOD as the positive class: the probability
/// that an OOD score exceeds an ID score, ties counting one half.
inline double auroc(std::span<const double> scores_id, std::span<const double> scores_ood) {
  return rank_sum_test(scores_id, scores_ood).auroc;
}

}  // namespace diffpath
