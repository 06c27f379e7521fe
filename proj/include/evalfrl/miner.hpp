#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evalfrl/common.hpp"

namespace evalfrl::miner {

enum class CandidateFamily { Linear, TreeEnsemble, Knn, Mlp };

const char* candidate_family_name(CandidateFamily f);

// One sampled configuration from the search space. Only the fields of the
// chosen family are meaningful; the rest stay at their zero defaults.
struct CandidateSpec {
  CandidateFamily family = CandidateFamily::Linear;
  double l2 = 0.0;         // linear: ridge penalty
  int trees = 0;           // tree_ensemble
  int depth = 0;
  double tree_lr = 0.0;
  int k = 0;               // knn
  int hidden = 0;          // mlp
  int epochs = 0;
  double lr = 0.0;
  std::uint64_t trial_seed = 0;

  nlohmann::ordered_json to_json() const;
};

// Probability-of-s=1 scorer produced by fit_candidate.
using Predictor = std::function<std::vector<double>(const Matrix&)>;

struct MinerReport {
  CandidateSpec best;
  double validation_auc = 0.0;  // winner's internal CV score
  double test_acc = 0.0;        // threshold 0.5
  double test_auc = 0.0;
  double majority_share = 0.0;  // larger S group share of train
  int trials = 0;

  nlohmann::ordered_json to_json() const;
};

// Trains one candidate on (z, s). Throws ConfigError on out-of-range
// hyperparameters (e.g. k > n), NumericError on non-finite inputs.
Predictor fit_candidate(const CandidateSpec& spec, const Matrix& z,
                        const std::vector<int>& s);

// Seeded random search: samples `budget` candidates, scores each by 3-fold
// internal AUC on the train half, refits the winner on all of train and
// reports held-out test ACC/AUC. Ties go to higher validation accuracy, then
// to the earlier trial. Deterministic given the seed; the test half never
// influences the choice.
MinerReport mine(const Matrix& train_z, const std::vector<int>& s_train,
                 const Matrix& test_z, const std::vector<int>& s_test,
                 int budget, std::uint64_t seed);

}  // namespace evalfrl::miner
