#pragma once

#include <functional>
#include <string>
#include <vector>

#include "evalfrl/common.hpp"

namespace evalfrl::tape {

using NodeId = int;

// Single-use reverse-accumulation tape over real matrices. Build the graph
// with the op methods, call backward(root) once on a 1x1 root, then read
// gradients of leaf nodes. Node ids are creation-ordered, so parents always
// precede children and one reverse sweep suffices.
//
// Ops with a kink (relu, abs, clamp, the MI penalty's probability boundary)
// record how close the forward pass came to it; gradient checking uses
// min_kink_margin() to re-sample configurations where a finite-difference
// probe would straddle the kink.
class Tape {
 public:
  NodeId constant(Matrix v);
  NodeId leaf(const Matrix& v);  // alias for constant; marks trainable inputs

  const Matrix& value(NodeId id) const { return nodes_[id].value; }
  const Matrix& gradient(NodeId id) const { return nodes_[id].grad; }

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId hadamard(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId add_scalar(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  // x: n x d plus one broadcast row r: 1 x d
  NodeId add_row(NodeId x, NodeId r);

  NodeId tanh_op(NodeId a);
  NodeId sigmoid_op(NodeId a);
  NodeId relu_op(NodeId a);
  NodeId exp_op(NodeId a);
  NodeId log_op(NodeId a);
  NodeId square_op(NodeId a);
  NodeId abs_op(NodeId a);
  NodeId clamp_op(NodeId a, double lo, double hi);

  NodeId sum(NodeId a);       // 1x1
  NodeId mean(NodeId a);      // 1x1
  NodeId col_mean(NodeId a);  // 1 x d
  NodeId select_rows(NodeId a, const std::vector<int>& rows);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId row_softmax(NodeId a);

  // identity forward; upstream gradient multiplied by -lambda on the way back
  NodeId grl(NodeId a, double lambda);
  // value = value(p) + residual with the residual held constant, so a frozen
  // sample m = p0 + residual behaves as a smooth function of the parameters;
  // the gradient passes to p unchanged
  NodeId straight_through(NodeId p, const Matrix& residual);

  // D_ij = squared Euclidean distance between row i of a and row j of b
  NodeId pairwise_sqdist(NodeId a, NodeId b);
  // biased V-statistic squared MMD with Gaussian kernel of the given bandwidth
  NodeId rbf_mmd2(NodeId a, NodeId b, double bandwidth);

  // mean over elements of softplus(z) - t .* z (binary cross-entropy against
  // targets t in {0,1} with logits z), numerically stable at large |z|
  NodeId bce_with_logits_mean(NodeId logits, const Matrix& targets);

  // Exact mutual information, in bits, between each column of a {0,1}-valued
  // code matrix and the binary group labels, summed over columns. The forward
  // value extends smoothly to near-binary inputs (log arguments clamped away
  // from 0); the probability-boundary distance feeds the kink margin.
  NodeId bernoulli_mi_bits(NodeId code, const std::vector<int>& groups);

  void backward(NodeId root);

  double min_kink_margin() const { return min_kink_margin_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void()> pull;  // adds this node's contribution to parents
  };

  NodeId push(Matrix value, std::function<void()> pull = nullptr);
  void note_kink(double margin);

  std::vector<Node> nodes_;
  double min_kink_margin_ = 1e300;
};

}  // namespace evalfrl::tape
