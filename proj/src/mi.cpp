#include "evalfrl/mi.hpp"

#include <bit>
#include <cmath>
#include <map>

#include <Eigen/LU>

namespace evalfrl::mi {
namespace {

std::vector<std::uint64_t> row_key(const Matrix& rows, long i) {
  std::vector<std::uint64_t> key(std::size_t(rows.cols()));
  for (long j = 0; j < rows.cols(); ++j) {
    double v = rows(i, j);
    if (v == 0.0) v = 0.0;  // folds -0.0 onto +0.0 before taking the bits
    key[std::size_t(j)] = std::bit_cast<std::uint64_t>(v);
  }
  return key;
}

double entropy_bits(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log2(v);
  return h;
}

bool full_rank(const Matrix& w) {
  Eigen::FullPivLU<Matrix> lu(w);
  return lu.rank() == std::min(w.rows(), w.cols());
}

}  // namespace

JointTable joint_table(const Matrix& rows, const std::vector<int>& s) {
  if (rows.rows() == 0) throw ShapeError("joint_table: empty input");
  if (long(s.size()) != rows.rows())
    throw ShapeError("joint_table: rows and s lengths differ");
  if (!all_finite(rows)) throw NumericError("joint_table: non-finite row entries");

  JointTable table;
  std::map<std::vector<std::uint64_t>, int> symbol_of;
  for (long i = 0; i < rows.rows(); ++i) {
    if (s[std::size_t(i)] != 0 && s[std::size_t(i)] != 1)
      throw ShapeError("joint_table: s must be binary");
    auto [it, inserted] = symbol_of.try_emplace(row_key(rows, i), int(table.counts.size()));
    if (inserted) table.counts.push_back({0, 0});
    table.counts[std::size_t(it->second)][std::size_t(s[std::size_t(i)])] += 1;
    table.total += 1;
  }
  return table;
}

double JointTable::mi_bits() const {
  const double n = double(total);
  double s_margin[2] = {0, 0};
  for (const auto& c : counts) {
    s_margin[0] += double(c[0]);
    s_margin[1] += double(c[1]);
  }
  double mi = 0;
  for (const auto& c : counts) {
    const double pz = double(c[0] + c[1]) / n;
    for (int s = 0; s < 2; ++s) {
      if (c[std::size_t(s)] == 0) continue;
      const double pzs = double(c[std::size_t(s)]) / n;
      mi += pzs * std::log2(pzs / (pz * (s_margin[s] / n)));
    }
  }
  return mi;
}

double JointTable::row_entropy_bits() const {
  std::vector<double> p;
  for (const auto& c : counts) p.push_back(double(c[0] + c[1]) / double(total));
  return entropy_bits(p);
}

double JointTable::s_entropy_bits() const {
  double s1 = 0;
  for (const auto& c : counts) s1 += double(c[1]);
  return entropy_bits({s1 / double(total), 1.0 - s1 / double(total)});
}

double plugin_mi(const Matrix& rows, const std::vector<int>& s) {
  return joint_table(rows, s).mi_bits();
}

Eigen::MatrixXi quantize(const Matrix& z, int bins) {
  if (bins < 1) throw ConfigError("quantize: bins must be at least 1");
  Eigen::MatrixXi out(z.rows(), z.cols());
  out.setZero();
  for (long j = 0; j < z.cols(); ++j) {
    const double lo = z.col(j).minCoeff();
    const double hi = z.col(j).maxCoeff();
    if (hi == lo) continue;  // constant column stays at bin 0
    const double width = (hi - lo) / double(bins);
    for (long i = 0; i < z.rows(); ++i) {
      const int bin = int(std::floor((z(i, j) - lo) / width));
      out(i, j) = std::min(bins - 1, std::max(0, bin));
    }
  }
  return out;
}

bool LayerInvarianceReport::all_layers_equal() const {
  for (const LayerMiRecord& rec : layers)
    if (!rec.equal_to_input) return false;
  return true;
}

nlohmann::ordered_json LayerInvarianceReport::to_json() const {
  nlohmann::ordered_json j;
  j["input_mi_bits"] = input_mi_bits;
  j["quant_bins"] = quant_bins;
  j["injective_claim"] = injective_claim;
  j["layers"] = nlohmann::ordered_json::array();
  for (const LayerMiRecord& rec : layers) {
    nlohmann::ordered_json lj;
    lj["layer"] = rec.layer;
    lj["mi_bits"] = rec.mi_bits;
    lj["equal_to_input"] = rec.equal_to_input;
    lj["quantized_mi_bits"] = rec.quantized_mi_bits;
    j["layers"].push_back(lj);
  }
  return j;
}

LayerInvarianceReport layer_invariance_check(const std::vector<nn::LayerSpec>& stack,
                                             const data::Dataset& ds, int quant_bins) {
  if (stack.empty()) throw ShapeError("layer_invariance_check: empty stack");
  for (long i = 0; i < ds.features.size(); ++i)
    if (ds.features.data()[i] != std::floor(ds.features.data()[i]))
      throw ShapeError("layer_invariance_check: features must be integer-valued");

  bool injective = true;
  for (const nn::LayerSpec& layer : stack)
    injective = injective && nn::activation_injective(layer.activation);
  if (injective) {
    for (const nn::LayerSpec& layer : stack) {
      if (layer.in_width != layer.out_width)
        throw NumericError("layer_invariance_check: injective claim needs square weights");
      if (!full_rank(layer.weights))
        throw NumericError("layer_invariance_check: rank-deficient weights under injective claim");
    }
  }

  LayerInvarianceReport report;
  report.quant_bins = quant_bins;
  report.injective_claim = injective;
  report.input_mi_bits = plugin_mi(ds.features, ds.sensitive);

  const auto activations = nn::forward(stack, ds.features);
  for (std::size_t i = 0; i < activations.size(); ++i) {
    LayerMiRecord rec;
    rec.layer = int(i) + 1;
    rec.mi_bits = plugin_mi(activations[i], ds.sensitive);
    rec.equal_to_input = std::abs(rec.mi_bits - report.input_mi_bits) < 1e-9;
    rec.quantized_mi_bits =
        plugin_mi(quantize(activations[i], quant_bins).cast<double>(), ds.sensitive);
    report.layers.push_back(rec);
  }
  return report;
}

double sampled_final_layer_mi(const std::vector<nn::LayerSpec>& stack,
                              const data::Dataset& ds, std::uint64_t seed) {
  if (stack.empty()) throw ShapeError("sampled_final_layer_mi: empty stack");
  const Matrix* input = &ds.features;
  std::vector<Matrix> activations;
  if (stack.size() > 1) {
    std::vector<nn::LayerSpec> trunk(stack.begin(), std::prev(stack.end()));
    activations = nn::forward(trunk, ds.features);
    input = &activations.back();
  }
  const nn::LayerSpec& last = stack.back();
  last.validate();
  Matrix z = (*input) * last.weights.transpose();
  z.rowwise() += last.bias.transpose();

  Rng rng(derive_seed(seed, "sampled_final_layer"));
  Matrix code(z.rows(), z.cols());
  for (long i = 0; i < z.rows(); ++i)
    for (long j = 0; j < z.cols(); ++j) {
      const double p = 1.0 / (1.0 + std::exp(-z(i, j)));
      code(i, j) = rng.next_double() < p ? 1.0 : 0.0;
    }
  return plugin_mi(code, ds.sensitive);
}

}  // namespace evalfrl::mi
