#pragma once

#include <functional>
#include <string>
#include <vector>

#include "evalfrl/common.hpp"
#include "evalfrl/tape.hpp"

namespace evalfrl::nn {

enum class Activation { Tanh, Sigmoid, Relu, Identity };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);
bool activation_injective(Activation a);  // tanh, sigmoid, identity

struct LayerSpec {
  int in_width = 0;
  int out_width = 0;
  Activation activation = Activation::Tanh;
  Matrix weights;  // out x in
  Vector bias;     // out

  void validate() const;  // throws ShapeError
};

// Z^1..Z^L for a batch (rows are examples); Z^0 = x is implied. Z^{L-1},
// the second-to-last entry, is the representation layer.
std::vector<Matrix> forward(const std::vector<LayerSpec>& stack, const Matrix& x);

// Ordered named parameter arrays; iteration order is insertion order and is
// part of the training contract (optimizer state and gradient records are
// congruent by index).
struct ParameterSet {
  std::vector<std::pair<std::string, Matrix>> items;

  int add(const std::string& name, Matrix value);
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  std::size_t size() const { return items.size(); }
  long coefficient_count() const;
};

struct GradientRecord {
  std::vector<Matrix> grads;  // congruent with ParameterSet by index

  void check_finite() const;  // throws NumericError
};

// Evaluates the loss at theta; when record is non-null it must also fill the
// analytic gradient. One callable serves training, grad and grad_check.
using LossFunction = std::function<double(const ParameterSet&, GradientRecord*)>;

GradientRecord grad(const LossFunction& loss, const ParameterSet& theta);

// Max over coefficients of |analytic - central difference| /
// (|analytic| + |difference| + 1e-12) at the given step.
double grad_check(const LossFunction& loss, const ParameterSet& theta, double step);

struct SgdHyper {
  double lr = 0.01;
};

struct AdamHyper {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m, v;
  long t = 0;
};

void sgd_step(ParameterSet& theta, const GradientRecord& g, const SgdHyper& hyper);
void adam_step(ParameterSet& theta, const GradientRecord& g, AdamState& state,
               const AdamHyper& hyper);

// uniform(-sqrt(6/(fan_in+fan_out)), +...); biases are zero
Matrix glorot_init(int out_width, int in_width, Rng& rng);
LayerSpec make_layer(int in_width, int out_width, Activation activation, Rng& rng);

// value-only biased V-statistic squared MMD (see Tape::rbf_mmd2 for the
// differentiable form)
double rbf_mmd2(const Matrix& a, const Matrix& b, double bandwidth);

// median pairwise Euclidean distance of the merged batch; falls back to 1
// when every distance is zero
double median_bandwidth(const Matrix& a, const Matrix& b);

// one stack layer on the tape: activation(x * W^T + b)
tape::NodeId tape_layer(tape::Tape& t, tape::NodeId x, tape::NodeId weights,
                        tape::NodeId bias_row, Activation activation);

}  // namespace evalfrl::nn
