#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evalfrl/common.hpp"

namespace evalfrl::data {

enum class ColumnKind { Continuous, Categorical };

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::Continuous;
  // categorical only; empty at load time means infer from the file in
  // first-appearance order
  std::vector<std::string> vocabulary;
};

// Column descriptors for a CSV file. Feature columns are listed in the order
// they should appear in the feature matrix; label/sensitive name the columns
// binarized against their positive/privileged value.
struct Schema {
  std::vector<ColumnSpec> feature_columns;
  std::string label_column;
  std::string label_positive;
  std::string sensitive_column;
  std::string sensitive_privileged;
};

// Tabular dataset. Categorical cells are stored as vocabulary indices cast to
// double; labels and sensitive hold only {0,1}.
struct Dataset {
  std::string name;
  Matrix features;  // n x d
  std::vector<int> labels;
  std::vector<int> sensitive;
  std::vector<ColumnSpec> columns;  // size d, vocabularies resolved

  int n() const { return int(features.rows()); }
  int d() const { return int(features.cols()); }
  Dataset subset(const std::vector<int>& rows) const;
  void validate() const;  // throws ShapeError on any broken invariant
};

struct ColumnTransform {
  ColumnKind kind = ColumnKind::Continuous;
  double mean = 0.0;
  double stddev = 0.0;  // population; 0 marks a constant column (output zeros)
  std::vector<std::string> vocabulary;  // one-hot layout, all slots kept
};

struct PreparedDataset {
  Matrix features;  // n x d' after standardization / one-hot expansion
  std::vector<int> labels;
  std::vector<int> sensitive;
  std::vector<ColumnTransform> transform;  // per raw column, in order

  int n() const { return int(features.rows()); }
  int d() const { return int(features.cols()); }
};

// Discrete synthetic source with a fully explicit joint distribution over
// (x, s, y). The d features take symbols {0..alphabet-1}; a feature tuple is
// flattened big-endian into x_index, and the joint table is flat with
// index = (x_index * 2 + s) * 2 + y. pi_s must match the table's S marginal.
struct SynthSpec {
  std::string name;
  int n = 0;
  double pi_s = 0.0;
  int d = 0;
  int alphabet = 0;
  std::vector<double> joint;
  std::uint64_t seed = 0;

  std::size_t x_states() const;
  void validate() const;  // throws ConfigError
};

struct SynthResult {
  Dataset dataset;
  double exact_i_xs = 0.0;  // bits, from the table (not the sample)
  double exact_i_xy = 0.0;
};

// Strict CSV reader: UTF-8, header row, comma separator, '.' decimal point,
// no quoting. Empty cells and ragged rows are rejected. Throws SchemaError
// for missing or non-binary label/sensitive columns, ParseError (with row
// index) for malformed cells, VocabularyError for a categorical value outside
// an explicitly supplied vocabulary.
Dataset load_dataset(const std::string& path, const Schema& schema);

// Fits the transform on train only (population variance; constant columns map
// to zeros) and applies it to train plus every dataset in apply_to; element 0
// of the result is the prepared train set. A categorical index unseen in the
// train vocabulary throws VocabularyError.
std::vector<PreparedDataset> preprocess(const Dataset& train,
                                        const std::vector<Dataset>& apply_to);

// Shuffles rows with a generator seeded from (seed, iteration) and takes the
// first ceil(2n/3) as train, the rest as test, both in permuted order.
std::pair<Dataset, Dataset> holdout_split(const Dataset& ds, std::uint64_t seed,
                                          int iteration);

struct FoldIndices {
  std::vector<int> fit;
  std::vector<int> validate;
};

// k disjoint validation folds covering 0..n-1, sizes differing by at most 1
// (earlier folds take the remainder), from a seeded shuffle.
std::vector<FoldIndices> kfold_indices(int n, int k, std::uint64_t seed);
std::vector<FoldIndices> kfold(const Dataset& train, int k, std::uint64_t seed);

// Draws spec.n i.i.d. rows from the joint table with the spec seed and returns
// the analytic I(X;S) and I(X;Y) in bits computed from the table.
SynthResult synth_discrete(const SynthSpec& spec);

// JSON forms used by experiment configuration files.
Schema schema_from_json(const nlohmann::json& j);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

}  // namespace evalfrl::data
