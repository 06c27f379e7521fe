#include "evalfrl/nn.hpp"

#include <algorithm>
#include <cmath>

namespace evalfrl::nn {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  throw ConfigError("unknown activation");
}

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "relu") return Activation::Relu;
  if (name == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + name + "'");
}

bool activation_injective(Activation a) { return a != Activation::Relu; }

void LayerSpec::validate() const {
  if (in_width <= 0 || out_width <= 0) throw ShapeError("layer widths must be positive");
  if (weights.rows() != out_width || weights.cols() != in_width)
    throw ShapeError("layer weight shape disagrees with declared widths");
  if (bias.size() != out_width) throw ShapeError("layer bias length disagrees");
  if (!all_finite(weights) || !bias.allFinite())
    throw NumericError("layer holds non-finite entries");
}

namespace {

Matrix apply_activation(Matrix z, Activation a) {
  switch (a) {
    case Activation::Tanh: return z.array().tanh();
    case Activation::Sigmoid:
      return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Identity: return z;
  }
  throw ConfigError("unknown activation");
}

}  // namespace

std::vector<Matrix> forward(const std::vector<LayerSpec>& stack, const Matrix& x) {
  if (stack.empty()) throw ShapeError("forward: empty stack");
  std::vector<Matrix> activations;
  const Matrix* current = &x;
  for (const LayerSpec& layer : stack) {
    layer.validate();
    if (current->cols() != layer.in_width)
      throw ShapeError("forward: input width " + std::to_string(current->cols()) +
                       " does not match layer in_width " + std::to_string(layer.in_width));
    Matrix z = (*current) * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    activations.push_back(apply_activation(std::move(z), layer.activation));
    current = &activations.back();
  }
  return activations;
}

int ParameterSet::add(const std::string& name, Matrix value) {
  for (const auto& [existing, unused] : items)
    if (existing == name) throw ConfigError("duplicate parameter name '" + name + "'");
  items.emplace_back(name, std::move(value));
  return int(items.size() - 1);
}

Matrix& ParameterSet::at(const std::string& name) {
  for (auto& [key, value] : items)
    if (key == name) return value;
  throw ConfigError("no parameter named '" + name + "'");
}

const Matrix& ParameterSet::at(const std::string& name) const {
  for (const auto& [key, value] : items)
    if (key == name) return value;
  throw ConfigError("no parameter named '" + name + "'");
}

long ParameterSet::coefficient_count() const {
  long total = 0;
  for (const auto& [name, value] : items) total += value.size();
  return total;
}

void GradientRecord::check_finite() const {
  for (const Matrix& g : grads)
    if (!all_finite(g)) throw NumericError("gradient holds non-finite entries");
}

GradientRecord grad(const LossFunction& loss, const ParameterSet& theta) {
  GradientRecord record;
  const double value = loss(theta, &record);
  if (!std::isfinite(value)) throw NumericError("loss is non-finite");
  if (record.grads.size() != theta.items.size())
    throw ShapeError("gradient record is not congruent with the parameter set");
  record.check_finite();
  return record;
}

double grad_check(const LossFunction& loss, const ParameterSet& theta, double step) {
  if (step <= 0) throw NumericError("grad_check: step must be positive");
  const GradientRecord analytic = grad(loss, theta);
  ParameterSet probe = theta;
  double worst = 0;
  for (std::size_t p = 0; p < probe.items.size(); ++p) {
    Matrix& array = probe.items[p].second;
    for (long i = 0; i < array.size(); ++i) {
      const double keep = array.data()[i];
      array.data()[i] = keep + step;
      const double up = loss(probe, nullptr);
      array.data()[i] = keep - step;
      const double down = loss(probe, nullptr);
      array.data()[i] = keep;
      const double fd = (up - down) / (2 * step);
      const double an = analytic.grads[p].data()[i];
      worst = std::max(worst, std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-12));
    }
  }
  return worst;
}

void sgd_step(ParameterSet& theta, const GradientRecord& g, const SgdHyper& hyper) {
  if (g.grads.size() != theta.items.size())
    throw ShapeError("sgd_step: gradient record not congruent");
  for (std::size_t p = 0; p < theta.items.size(); ++p) {
    theta.items[p].second -= hyper.lr * g.grads[p];
    if (!all_finite(theta.items[p].second))
      throw NumericError("sgd_step: non-finite update for '" + theta.items[p].first + "'");
  }
}

void adam_step(ParameterSet& theta, const GradientRecord& g, AdamState& state,
               const AdamHyper& hyper) {
  if (g.grads.size() != theta.items.size())
    throw ShapeError("adam_step: gradient record not congruent");
  if (state.m.empty()) {
    for (const auto& [name, value] : theta.items) {
      state.m.push_back(Matrix::Zero(value.rows(), value.cols()));
      state.v.push_back(Matrix::Zero(value.rows(), value.cols()));
    }
  }
  state.t += 1;
  const double correction1 = 1.0 - std::pow(hyper.beta1, double(state.t));
  const double correction2 = 1.0 - std::pow(hyper.beta2, double(state.t));
  for (std::size_t p = 0; p < theta.items.size(); ++p) {
    state.m[p] = hyper.beta1 * state.m[p] + (1.0 - hyper.beta1) * g.grads[p];
    state.v[p] =
        hyper.beta2 * state.v[p].array() + (1.0 - hyper.beta2) * g.grads[p].array().square();
    const Matrix m_hat = state.m[p] / correction1;
    const Matrix v_hat = state.v[p] / correction2;
    theta.items[p].second.array() -=
        hyper.lr * m_hat.array() / (v_hat.array().sqrt() + hyper.eps);
    if (!all_finite(theta.items[p].second))
      throw NumericError("adam_step: non-finite update for '" + theta.items[p].first + "'");
  }
}

Matrix glorot_init(int out_width, int in_width, Rng& rng) {
  const double limit = std::sqrt(6.0 / double(in_width + out_width));
  Matrix w(out_width, in_width);
  for (long j = 0; j < w.cols(); ++j)
    for (long i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-limit, limit);
  return w;
}

LayerSpec make_layer(int in_width, int out_width, Activation activation, Rng& rng) {
  LayerSpec layer;
  layer.in_width = in_width;
  layer.out_width = out_width;
  layer.activation = activation;
  layer.weights = glorot_init(out_width, in_width, rng);
  layer.bias = Vector::Zero(out_width);
  return layer;
}

double rbf_mmd2(const Matrix& a, const Matrix& b, double bandwidth) {
  if (a.rows() == 0 || b.rows() == 0) throw ShapeError("rbf_mmd2: empty batch");
  if (bandwidth <= 0) throw NumericError("rbf_mmd2: bandwidth must be positive");
  const double factor = -1.0 / (2.0 * bandwidth * bandwidth);
  auto mean_kernel = [factor](const Matrix& u, const Matrix& v) {
    double total = 0;
    for (long i = 0; i < u.rows(); ++i)
      for (long j = 0; j < v.rows(); ++j)
        total += std::exp(factor * (u.row(i) - v.row(j)).squaredNorm());
    return total / double(u.rows() * v.rows());
  };
  return mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
}

double median_bandwidth(const Matrix& a, const Matrix& b) {
  Matrix merged(a.rows() + b.rows(), a.cols());
  merged.topRows(a.rows()) = a;
  merged.bottomRows(b.rows()) = b;
  std::vector<double> distances;
  for (long i = 0; i < merged.rows(); ++i)
    for (long j = i + 1; j < merged.rows(); ++j)
      distances.push_back((merged.row(i) - merged.row(j)).norm());
  if (distances.empty()) return 1.0;
  std::sort(distances.begin(), distances.end());
  const std::size_t n = distances.size();
  const double median = n % 2 == 1 ? distances[n / 2]
                                   : 0.5 * (distances[n / 2 - 1] + distances[n / 2]);
  return median > 0 ? median : 1.0;
}

tape::NodeId tape_layer(tape::Tape& t, tape::NodeId x, tape::NodeId weights,
                        tape::NodeId bias_row, Activation activation) {
  const tape::NodeId z = t.add_row(t.matmul(x, t.transpose(weights)), bias_row);
  switch (activation) {
    case Activation::Tanh: return t.tanh_op(z);
    case Activation::Sigmoid: return t.sigmoid_op(z);
    case Activation::Relu: return t.relu_op(z);
    case Activation::Identity: return z;
  }
  throw ConfigError("unknown activation");
}

}  // namespace evalfrl::nn
