#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "evalfrl/common.hpp"
#include "evalfrl/dataset.hpp"
#include "evalfrl/nn.hpp"

namespace evalfrl::mi {

// Empirical joint over (row symbol, s). Symbols are distinct rows under exact
// 64-bit equality (with -0.0 folded onto +0.0), numbered in first-appearance
// order.
struct JointTable {
  std::vector<std::array<long, 2>> counts;  // per symbol: count at s=0, s=1
  long total = 0;

  double mi_bits() const;
  double row_entropy_bits() const;
  double s_entropy_bits() const;
};

JointTable joint_table(const Matrix& rows, const std::vector<int>& s);

// plug-in (maximum-likelihood) mutual information in bits between distinct
// rows and the binary vector s
double plugin_mi(const Matrix& rows, const std::vector<int>& s);

// Per-column equal-width binning over the observed range; the column maximum
// lands in the top bin and constant columns map to bin 0.
Eigen::MatrixXi quantize(const Matrix& z, int bins);

struct LayerMiRecord {
  int layer = 0;  // 1-based position in the stack
  double mi_bits = 0;
  bool equal_to_input = false;  // within 1e-9 bits
  double quantized_mi_bits = 0;
};

struct LayerInvarianceReport {
  double input_mi_bits = 0;
  int quant_bins = 0;
  bool injective_claim = false;  // all activations injective; ranks verified
  std::vector<LayerMiRecord> layers;

  bool all_layers_equal() const;
  nlohmann::ordered_json to_json() const;
};

// Pushes the dataset through the stack and reports I(Z^i;S) per layer next to
// I(X;S), plus each layer's quantized MI at quant_bins bins. When every
// activation is injective the weights must be square and numerically full
// rank (NumericError otherwise): that is the regime where the per-layer MI
// provably cannot move. Features must be integer-valued (the discrete setting
// where the plug-in estimate is exact).
LayerInvarianceReport layer_invariance_check(const std::vector<nn::LayerSpec>& stack,
                                             const data::Dataset& ds, int quant_bins);

// I(Z;S) in bits after replacing the final layer by seeded Bernoulli sampling
// of sigmoid outputs of its pre-activation.
double sampled_final_layer_mi(const std::vector<nn::LayerSpec>& stack,
                              const data::Dataset& ds, std::uint64_t seed);

}  // namespace evalfrl::mi
