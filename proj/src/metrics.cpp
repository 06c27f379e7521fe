#include "evalfrl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace evalfrl::metrics {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": length mismatch");
}

// positive-prediction rates per sensitive group; throws on an empty group
std::pair<double, double> group_rates(const std::vector<int>& y_hat,
                                      const std::vector<int>& s) {
  require_same_length(y_hat.size(), s.size(), "group_rates");
  double sum1 = 0.0, sum0 = 0.0;
  std::size_t n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == 1) {
      sum1 += y_hat[i];
      ++n1;
    } else {
      sum0 += y_hat[i];
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) throw NumericError("group_rates: empty sensitive group");
  return {sum1 / static_cast<double>(n1), sum0 / static_cast<double>(n0)};
}

}  // namespace

double y_acc(const std::vector<int>& y_hat, const std::vector<int>& y) {
  require_same_length(y_hat.size(), y.size(), "y_acc");
  if (y.empty()) throw ShapeError("y_acc: empty input");
  double err = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) err += std::abs(y[i] - y_hat[i]);
  return 1.0 - err / static_cast<double>(y.size());
}

double auc(const std::vector<double>& scores, const std::vector<int>& y) {
  require_same_length(scores.size(), y.size(), "auc");
  std::size_t npos = 0;
  for (int v : y) npos += (v == 1);
  const std::size_t nneg = y.size() - npos;
  if (npos == 0 || nneg == 0) throw NumericError("auc: single-class labels");

  // sort by score; walk tie blocks and use the mean rank within each block
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (y[order[k]] == 1) rank_sum_pos += mean_rank;
    i = j;
  }
  const double np = static_cast<double>(npos);
  const double nn = static_cast<double>(nneg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double y_discrim(const std::vector<int>& y_hat, const std::vector<int>& s) {
  auto [r1, r0] = group_rates(y_hat, s);
  return std::abs(r1 - r0);
}

double audc(const std::vector<double>& scores, const std::vector<int>& s,
            int threshold_count) {
  require_same_length(scores.size(), s.size(), "audc");
  if (threshold_count < 2) throw NumericError("audc: need at least 2 thresholds");
  double total = 0.0;
  std::vector<int> y_hat(scores.size());
  for (int j = 0; j < threshold_count; ++j) {
    const double t = static_cast<double>(j) / static_cast<double>(threshold_count - 1);
    for (std::size_t i = 0; i < scores.size(); ++i) y_hat[i] = scores[i] >= t ? 1 : 0;
    total += y_discrim(y_hat, s);
  }
  return total / static_cast<double>(threshold_count);
}

double spd(const std::vector<int>& y_hat, const std::vector<int>& s) {
  auto [r1, r0] = group_rates(y_hat, s);
  return r0 - r1;
}

double delta(const std::vector<int>& y_hat, const std::vector<int>& y,
             const std::vector<int>& s) {
  return y_discrim(y_hat, s) - y_acc(y_hat, y);
}

namespace {

// Discounted accumulation of top-i protected-share deviations over the cut
// grid. `protected_at` marks s=0 members in ranked order.
double rnd_accumulate(const std::vector<char>& protected_at, int step) {
  const std::size_t n = protected_at.size();
  std::size_t total_protected = 0;
  for (char c : protected_at) total_protected += c;
  const double pop_share =
      static_cast<double>(total_protected) / static_cast<double>(n);

  double acc = 0.0;
  std::size_t in_top = 0;
  std::size_t i = 0;
  for (std::size_t cut = step; cut <= n; cut += step) {
    for (; i < cut; ++i) in_top += protected_at[i];
    const double top_share = static_cast<double>(in_top) / static_cast<double>(cut);
    acc += std::abs(top_share - pop_share) /
           std::log2(static_cast<double>(cut));
  }
  return acc;
}

}  // namespace

double rnd(const std::vector<double>& scores, const std::vector<int>& s,
           int step) {
  require_same_length(scores.size(), s.size(), "rnd");
  const std::size_t n = scores.size();
  if (step < 2) throw NumericError("rnd: step must be >= 2");
  if (n < static_cast<std::size_t>(step)) throw NumericError("rnd: N < step");

  std::size_t n_protected = 0;
  for (int v : s) n_protected += (v == 0);
  if (n_protected == 0 || n_protected == n)
    throw NumericError("rnd: empty sensitive group");

  // rank by descending score, stable in original index
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<char> ranked(n);
  for (std::size_t i = 0; i < n; ++i) ranked[i] = (s[order[i]] == 0) ? 1 : 0;

  // dummy ranking: all protected members last
  std::vector<char> dummy(n, 0);
  for (std::size_t i = n - n_protected; i < n; ++i) dummy[i] = 1;

  const double numerator = rnd_accumulate(ranked, step);
  const double normalizer = rnd_accumulate(dummy, step);
  if (normalizer == 0.0) throw NumericError("rnd: degenerate composition, normalizer 0");
  return numerator / normalizer;
}

MetricRecord evaluate_all(const std::vector<double>& scores,
                          const std::vector<int>& y, const std::vector<int>& s,
                          int fold, double gamma, int threshold_count,
                          int rnd_step) {
  std::vector<int> y_hat(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) y_hat[i] = scores[i] >= 0.5 ? 1 : 0;

  MetricRecord rec;
  rec.fold = fold;
  rec.gamma = gamma;
  rec.acc = y_acc(y_hat, y);
  rec.auc = auc(scores, y);
  rec.y_discrim = y_discrim(y_hat, s);
  rec.audc = audc(scores, s, threshold_count);
  rec.spd = spd(y_hat, s);
  rec.delta = delta(y_hat, y, s);
  rec.rnd = rnd(scores, s, rnd_step);
  rec.threshold_count = threshold_count;
  return rec;
}

}  // namespace evalfrl::metrics
