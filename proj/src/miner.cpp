#include "evalfrl/miner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evalfrl/dataset.hpp"
#include "evalfrl/metrics.hpp"
#include "evalfrl/nn.hpp"

namespace evalfrl::miner {

namespace {

Matrix take_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(long(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(long(i)) = m.row(rows[i]);
  return out;
}

std::vector<int> take(const std::vector<int>& v, const std::vector<int>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(v[std::size_t(r)]);
  return out;
}

double sigmoid(double z) { return 0.5 * (1.0 + std::tanh(0.5 * z)); }

void check_inputs(const Matrix& z, const std::vector<int>& s) {
  if (z.rows() == 0 || z.cols() == 0) throw ShapeError("empty representation");
  if (long(s.size()) != z.rows())
    throw ShapeError("sensitive length mismatch");
  if (!all_finite(z)) throw NumericError("non-finite representation entries");
  for (int v : s)
    if (v != 0 && v != 1) throw ShapeError("sensitive values must be 0 or 1");
}

// ---- linear: ridge-penalized logistic regression, full-batch descent ----

Predictor fit_linear(const CandidateSpec& spec, const Matrix& z,
                     const std::vector<int>& s) {
  if (spec.l2 < 0.0) throw ConfigError("ridge penalty must be >= 0");
  const long n = z.rows(), d = z.cols();
  Vector w = Vector::Zero(d);
  double b = 0.0;
  Vector t(n);
  for (long i = 0; i < n; ++i) t[i] = double(s[std::size_t(i)]);
  const double lr = 0.5 / std::max(1.0, z.rowwise().squaredNorm().mean() / 4.0);
  for (int it = 0; it < 300; ++it) {
    Vector p(n);
    const Vector logits = z * w + Vector::Constant(n, b);
    for (long i = 0; i < n; ++i) p[i] = sigmoid(logits[i]);
    const Vector r = p - t;
    const Vector gw = z.transpose() * r / double(n) + spec.l2 * w;
    const double gb = r.mean();
    w -= lr * gw;
    b -= lr * gb;
  }
  if (!w.allFinite() || !std::isfinite(b))
    throw NumericError("linear candidate diverged");
  return [w, b](const Matrix& q) {
    std::vector<double> out(std::size_t(q.rows()));
    const Vector logits = q * w + Vector::Constant(q.rows(), b);
    for (long i = 0; i < q.rows(); ++i) out[std::size_t(i)] = sigmoid(logits[i]);
    return out;
  };
}

// ---- tree_ensemble: gradient boosting with depth-limited regression trees ----

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  double value = 0.0;
  int left = -1, right = -1;
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict_row(const Matrix& z, long row) const {
    int id = 0;
    while (nodes[std::size_t(id)].feature >= 0) {
      const TreeNode& nd = nodes[std::size_t(id)];
      id = z(row, nd.feature) <= nd.threshold ? nd.left : nd.right;
    }
    return nodes[std::size_t(id)].value;
  }
};

// squared-error split on the gradient residuals; leaf = Newton step
int grow(Tree& tree, const Matrix& z, const Vector& resid, const Vector& hess,
         const std::vector<int>& rows, int depth) {
  const int id = int(tree.nodes.size());
  tree.nodes.emplace_back();

  double sum_r = 0.0, sum_h = 0.0;
  for (int r : rows) {
    sum_r += resid[r];
    sum_h += hess[r];
  }
  tree.nodes[std::size_t(id)].value = sum_r / (sum_h + 1e-12);
  if (depth == 0 || rows.size() < 2) return id;

  const double parent_sse_gain_base = sum_r * sum_r / double(rows.size());
  double best_gain = 1e-12;
  int best_feature = -1;
  double best_threshold = 0.0;

  std::vector<std::pair<double, int>> order(rows.size());
  for (long j = 0; j < z.cols(); ++j) {
    for (std::size_t i = 0; i < rows.size(); ++i)
      order[i] = {z(rows[i], j), rows[i]};
    std::sort(order.begin(), order.end());
    double left_r = 0.0;
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      left_r += resid[order[i].second];
      if (order[i].first == order[i + 1].first) continue;
      const double nl = double(i + 1), nr = double(order.size()) - nl;
      const double right_r = sum_r - left_r;
      const double gain = left_r * left_r / nl + right_r * right_r / nr -
                          parent_sse_gain_base;
      if (gain > best_gain) {
        best_gain = gain;
        best_feature = int(j);
        best_threshold = 0.5 * (order[i].first + order[i + 1].first);
      }
    }
  }
  if (best_feature < 0) return id;

  std::vector<int> left_rows, right_rows;
  for (int r : rows)
    (z(r, best_feature) <= best_threshold ? left_rows : right_rows).push_back(r);
  tree.nodes[std::size_t(id)].feature = best_feature;
  tree.nodes[std::size_t(id)].threshold = best_threshold;
  const int left = grow(tree, z, resid, hess, left_rows, depth - 1);
  tree.nodes[std::size_t(id)].left = left;
  const int right = grow(tree, z, resid, hess, right_rows, depth - 1);
  tree.nodes[std::size_t(id)].right = right;
  return id;
}

Predictor fit_trees(const CandidateSpec& spec, const Matrix& z,
                    const std::vector<int>& s) {
  if (spec.trees < 1 || spec.depth < 1 || !(spec.tree_lr > 0.0))
    throw ConfigError("tree ensemble needs trees >= 1, depth >= 1, positive rate");
  const long n = z.rows();
  double pos = 0.0;
  for (int v : s) pos += v;
  const double base = std::log(std::clamp(pos / double(n), 1e-9, 1.0 - 1e-9) /
                               (1.0 - std::clamp(pos / double(n), 1e-9, 1.0 - 1e-9)));
  Vector f = Vector::Constant(n, base);
  std::vector<int> all(std::size_t(n), 0);
  std::iota(all.begin(), all.end(), 0);

  std::vector<Tree> forest;
  forest.reserve(std::size_t(spec.trees));
  for (int t = 0; t < spec.trees; ++t) {
    Vector resid(n), hess(n);
    for (long i = 0; i < n; ++i) {
      const double p = sigmoid(f[i]);
      resid[i] = double(s[std::size_t(i)]) - p;
      hess[i] = p * (1.0 - p);
    }
    Tree tree;
    grow(tree, z, resid, hess, all, spec.depth);
    for (long i = 0; i < n; ++i)
      f[i] += spec.tree_lr * tree.predict_row(z, i);
    forest.push_back(std::move(tree));
  }

  const double rate = spec.tree_lr;
  return [forest, base, rate](const Matrix& q) {
    std::vector<double> out(std::size_t(q.rows()));
    for (long i = 0; i < q.rows(); ++i) {
      double fx = base;
      for (const Tree& tree : forest) fx += rate * tree.predict_row(q, i);
      out[std::size_t(i)] = sigmoid(fx);
    }
    return out;
  };
}

// ---- knn: uniform vote over the k nearest rows (ties broken by row index) ----

Predictor fit_knn(const CandidateSpec& spec, const Matrix& z,
                  const std::vector<int>& s) {
  if (spec.k < 1) throw ConfigError("k must be >= 1");
  if (spec.k > z.rows())
    throw ConfigError("k exceeds the number of training rows");
  const Matrix train = z;
  const std::vector<int> labels = s;
  const int k = spec.k;
  return [train, labels, k](const Matrix& q) {
    std::vector<double> out(std::size_t(q.rows()));
    std::vector<std::pair<double, int>> dist(std::size_t(train.rows()));
    for (long i = 0; i < q.rows(); ++i) {
      for (long j = 0; j < train.rows(); ++j)
        dist[std::size_t(j)] = {(q.row(i) - train.row(j)).squaredNorm(), int(j)};
      std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
      double vote = 0.0;
      for (int j = 0; j < k; ++j) vote += labels[std::size_t(dist[std::size_t(j)].second)];
      out[std::size_t(i)] = vote / double(k);
    }
    return out;
  };
}

// ---- mlp: one tanh hidden layer, full-batch descent ----

Predictor fit_mlp(const CandidateSpec& spec, const Matrix& z,
                  const std::vector<int>& s) {
  if (spec.hidden < 1 || spec.epochs < 1 || !(spec.lr > 0.0))
    throw ConfigError("mlp needs hidden >= 1, epochs >= 1, positive rate");
  const long n = z.rows(), d = z.cols();
  Rng rng(spec.trial_seed);
  Matrix w1 = nn::glorot_init(spec.hidden, int(d), rng);
  Vector b1 = Vector::Zero(spec.hidden);
  Matrix w2 = nn::glorot_init(1, spec.hidden, rng);
  double b2 = 0.0;
  Vector t(n);
  for (long i = 0; i < n; ++i) t[i] = double(s[std::size_t(i)]);

  for (int e = 0; e < spec.epochs; ++e) {
    const Matrix a = ((z * w1.transpose()).rowwise() + b1.transpose()).array().tanh();
    const Vector logits = a * w2.transpose() + Vector::Constant(n, b2);
    Vector r(n);
    for (long i = 0; i < n; ++i) r[i] = sigmoid(logits[i]) - t[i];
    r /= double(n);
    const Matrix gw2 = r.transpose() * a;           // 1 x hidden
    const double gb2 = r.sum();
    const Matrix da = (r * w2).array() * (1.0 - a.array().square());  // n x hidden
    const Matrix gw1 = da.transpose() * z;
    const Vector gb1 = da.colwise().sum().transpose();
    w1 -= spec.lr * gw1;
    b1 -= spec.lr * gb1;
    w2 -= spec.lr * gw2;
    b2 -= spec.lr * gb2;
  }
  if (!w1.allFinite() || !w2.allFinite() || !b1.allFinite() || !std::isfinite(b2))
    throw NumericError("mlp candidate diverged");
  return [w1, b1, w2, b2](const Matrix& q) {
    const Matrix a = ((q * w1.transpose()).rowwise() + b1.transpose()).array().tanh();
    const Vector logits = a * w2.transpose() + Vector::Constant(q.rows(), b2);
    std::vector<double> out(std::size_t(q.rows()));
    for (long i = 0; i < q.rows(); ++i) out[std::size_t(i)] = sigmoid(logits[i]);
    return out;
  };
}

CandidateSpec sample_candidate(std::uint64_t master, int trial, long n_min_fit) {
  Rng rng(derive_seed(master, "trial", std::uint64_t(trial)));
  CandidateSpec spec;
  spec.trial_seed = derive_seed(master, "trial_fit", std::uint64_t(trial));
  switch (rng.below(4)) {
    case 0:
      spec.family = CandidateFamily::Linear;
      spec.l2 = rng.log_uniform(1e-4, 1.0);
      break;
    case 1:
      spec.family = CandidateFamily::TreeEnsemble;
      spec.trees = 10 + int(rng.below(51));
      spec.depth = 1 + int(rng.below(3));
      spec.tree_lr = rng.log_uniform(0.05, 0.5);
      break;
    case 2:
      spec.family = CandidateFamily::Knn;
      spec.k = 1 + int(rng.below(std::uint64_t(std::min<long>(25, n_min_fit))));
      break;
    default:
      spec.family = CandidateFamily::Mlp;
      spec.hidden = 2 + int(rng.below(15));
      spec.epochs = 20 + int(rng.below(61));
      spec.lr = rng.log_uniform(1e-3, 0.1);
      break;
  }
  return spec;
}

double accuracy_at_half(const std::vector<double>& scores,
                        const std::vector<int>& s) {
  std::vector<int> hat(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) hat[i] = scores[i] >= 0.5 ? 1 : 0;
  return metrics::y_acc(hat, s);
}

}  // namespace

const char* candidate_family_name(CandidateFamily f) {
  switch (f) {
    case CandidateFamily::Linear: return "linear";
    case CandidateFamily::TreeEnsemble: return "tree_ensemble";
    case CandidateFamily::Knn: return "knn";
    case CandidateFamily::Mlp: return "mlp";
  }
  throw ConfigError("unknown candidate family");
}

nlohmann::ordered_json CandidateSpec::to_json() const {
  nlohmann::ordered_json j;
  j["family"] = candidate_family_name(family);
  switch (family) {
    case CandidateFamily::Linear: j["l2"] = l2; break;
    case CandidateFamily::TreeEnsemble:
      j["trees"] = trees;
      j["depth"] = depth;
      j["tree_lr"] = tree_lr;
      break;
    case CandidateFamily::Knn: j["k"] = k; break;
    case CandidateFamily::Mlp:
      j["hidden"] = hidden;
      j["epochs"] = epochs;
      j["lr"] = lr;
      break;
  }
  j["trial_seed"] = trial_seed;
  return j;
}

nlohmann::ordered_json MinerReport::to_json() const {
  nlohmann::ordered_json j;
  j["best"] = best.to_json();
  j["validation_auc"] = validation_auc;
  j["test_acc"] = test_acc;
  j["test_auc"] = test_auc;
  j["majority_share"] = majority_share;
  j["trials"] = trials;
  return j;
}

Predictor fit_candidate(const CandidateSpec& spec, const Matrix& z,
                        const std::vector<int>& s) {
  check_inputs(z, s);
  switch (spec.family) {
    case CandidateFamily::Linear: return fit_linear(spec, z, s);
    case CandidateFamily::TreeEnsemble: return fit_trees(spec, z, s);
    case CandidateFamily::Knn: return fit_knn(spec, z, s);
    case CandidateFamily::Mlp: return fit_mlp(spec, z, s);
  }
  throw ConfigError("unknown candidate family");
}

MinerReport mine(const Matrix& train_z, const std::vector<int>& s_train,
                 const Matrix& test_z, const std::vector<int>& s_test,
                 int budget, std::uint64_t seed) {
  if (budget < 1) throw ConfigError("budget must be >= 1");
  check_inputs(train_z, s_train);
  check_inputs(test_z, s_test);
  if (test_z.cols() != train_z.cols())
    throw ShapeError("train/test representation width mismatch");
  const long n = train_z.rows();
  long pos = 0;
  for (int v : s_train) pos += v;
  if (pos == 0 || pos == n)
    throw NumericError("sensitive attribute has a single class in train");

  const std::vector<data::FoldIndices> folds =
      data::kfold_indices(int(n), 3, derive_seed(seed, "cv"));
  long min_fit = n;
  for (const auto& fold : folds)
    min_fit = std::min(min_fit, long(fold.fit.size()));

  struct Scored {
    double auc = -1.0;
    double acc = -1.0;
    int trial = 0;
    CandidateSpec spec;
  };
  Scored best;

  for (int trial = 0; trial < budget; ++trial) {
    const CandidateSpec spec = sample_candidate(seed, trial, min_fit);
    double auc_sum = 0.0, acc_sum = 0.0;
    int counted = 0;
    for (const auto& fold : folds) {
      const Predictor predictor =
          fit_candidate(spec, take_rows(train_z, fold.fit), take(s_train, fold.fit));
      const std::vector<double> scores = predictor(take_rows(train_z, fold.validate));
      const std::vector<int> truth = take(s_train, fold.validate);
      try {
        auc_sum += metrics::auc(scores, truth);
      } catch (const NumericError&) {
        auc_sum += 0.5;  // single-class validation fold carries no signal
      }
      acc_sum += accuracy_at_half(scores, truth);
      ++counted;
    }
    const double auc = auc_sum / counted;
    const double acc = acc_sum / counted;
    if (auc > best.auc || (auc == best.auc && acc > best.acc)) {
      best = {auc, acc, trial, spec};
    }
  }

  const Predictor winner = fit_candidate(best.spec, train_z, s_train);
  const std::vector<double> test_scores = winner(test_z);

  MinerReport report;
  report.best = best.spec;
  report.validation_auc = best.auc;
  report.test_acc = accuracy_at_half(test_scores, s_test);
  report.test_auc = metrics::auc(test_scores, s_test);
  report.majority_share = double(std::max(pos, n - pos)) / double(n);
  report.trials = budget;
  return report;
}

}  // namespace evalfrl::miner
