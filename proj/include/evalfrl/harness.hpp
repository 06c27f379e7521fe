#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evalfrl/common.hpp"
#include "evalfrl/dataset.hpp"
#include "evalfrl/metrics.hpp"
#include "evalfrl/miner.hpp"
#include "evalfrl/models.hpp"

namespace evalfrl::harness {

// Source of one experiment's data: a CSV file with its schema, or a discrete
// synthetic spec with a fully known joint.
struct DatasetRef {
  std::string name;
  std::string csv_path;  // empty when synthetic
  data::Schema schema;
  std::optional<data::SynthSpec> synth;

  data::Dataset load() const;
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static DatasetRef from_json(const nlohmann::json& j);
};

// Discrete choice lists for the randomized search at gamma = 0. Every list
// must be nonempty; a one-point space pins that setting.
struct SearchSpace {
  std::vector<std::vector<int>> encoder_widths = {{8}};
  std::vector<int> repr_width = {8};
  std::vector<nn::Activation> activation = {nn::Activation::Tanh};
  std::vector<double> lr = {0.001, 0.01};
  std::vector<int> epochs = {40};
  std::vector<int> batch_size = {64};

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SearchSpace from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
  std::string experiment = "default";
  DatasetRef dataset;
  models::ModelSpec base;  // family and fixed settings; searched fields and
                           // seed are overwritten per trial / per fold
  SearchSpace search;
  int r = 15;
  int k = 3;
  std::uint64_t seed = 123;
  int n_iter = 100;
  std::vector<double> gammas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                0.6, 0.7, 0.8, 0.9, 1.0};
  int miner_budget = 32;
  std::string output_dir = "runs";

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct TuneResult {
  models::ModelSpec spec;      // winner; spec.seed = the fold seed
  double validation_auc = 0.0;
  std::vector<std::uint64_t> diverged;  // seeds of failed trials
};

// Randomized search over the choice lists, scored by mean k-fold task AUC at
// gamma = 0. Ties go to the earlier trial. Throws NumericError listing trial
// seeds when every trial diverges.
TuneResult tune(const ExperimentConfig& config, const data::PreparedDataset& train,
                std::uint64_t fold_seed);

struct SweepCell {
  double gamma = 0.0;
  models::TrainedModel model;
  metrics::MetricRecord record;
  models::Representation repr_train, repr_test;
};

// From-scratch refit per gamma with the fold seed, metrics on the test half,
// representation extraction for both halves. Fit errors carry (fold, gamma).
std::vector<SweepCell> gamma_sweep(const models::ModelSpec& best,
                                   const data::PreparedDataset& train,
                                   const data::PreparedDataset& test,
                                   const std::vector<double>& gammas, int fold);

struct Band {
  double mean = 0.0;
  double variance = 0.0;  // sample variance
  double lo = 0.0;        // 2.5th percentile of the draws
  double hi = 0.0;        // 97.5th
};

// 100 draws from Normal(mean, std) of the values; band = empirical 2.5-97.5
// percentile range. Throws NumericError for fewer than 2 values.
Band bootstrap_bands(const std::vector<double>& values, int n_boot,
                     std::uint64_t seed);

struct RunArtifacts {
  std::string root;  // <output_dir>/<experiment>/<family>/<dataset>
  std::vector<metrics::MetricRecord> records;
  std::vector<nlohmann::ordered_json> miner_reports;  // one per completed cell
  nlohmann::ordered_json summary;
  std::vector<std::string> failures;
};

// The full loop: r repeated holdout splits, tune at gamma = 0, gamma sweep,
// mining per cell plus a raw-feature baseline per fold, bootstrap aggregation.
// Partial failures keep completed cells and are listed in the manifest.
RunArtifacts run_experiment(const ExperimentConfig& config);

}  // namespace evalfrl::harness
