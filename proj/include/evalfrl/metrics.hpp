#ifndef EVALFRL_METRICS_HPP
#define EVALFRL_METRICS_HPP

#include <cstdint>
#include <vector>

#include "evalfrl/common.hpp"

namespace evalfrl::metrics {

// Allocation and task metrics for one (fold, gamma) cell.
struct MetricRecord {
  int fold = 0;
  double gamma = 0.0;
  double acc = 0.0;
  double auc = 0.0;
  double y_discrim = 0.0;
  double audc = 0.0;
  double spd = 0.0;
  double delta = 0.0;
  double rnd = 0.0;
  int threshold_count = 100;
};

// 1 - mean |y - y_hat|
double y_acc(const std::vector<int>& y_hat, const std::vector<int>& y);

// Mann-Whitney statistic; tied scores contribute 1/2. Throws NumericError if
// y holds a single class.
double auc(const std::vector<double>& scores, const std::vector<int>& y);

// |mean(y_hat | s=1) - mean(y_hat | s=0)|
double y_discrim(const std::vector<int>& y_hat, const std::vector<int>& s);

// Mean of y_discrim(1[score >= t], s) over t = j/(T-1), j = 0..T-1.
double audc(const std::vector<double>& scores, const std::vector<int>& s,
            int threshold_count = 100);

// P(y_hat=1 | s=0) - P(y_hat=1 | s=1), signed
double spd(const std::vector<int>& y_hat, const std::vector<int>& s);

// y_discrim - y_acc
double delta(const std::vector<int>& y_hat, const std::vector<int>& y,
             const std::vector<int>& s);

// Normalized discounted difference of s=0 group share at ranking cut-offs
// {step, 2*step, ...}; the normalizer comes from the ranking with all s=0
// members placed last. Ranking is by descending score, ties broken by index.
double rnd(const std::vector<double>& scores, const std::vector<int>& s,
           int step = 10);

// All seven metrics at classification threshold 0.5 on the scores.
MetricRecord evaluate_all(const std::vector<double>& scores,
                          const std::vector<int>& y, const std::vector<int>& s,
                          int fold, double gamma, int threshold_count = 100,
                          int rnd_step = 10);

}  // namespace evalfrl::metrics

#endif  // EVALFRL_METRICS_HPP
