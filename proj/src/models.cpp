#include "evalfrl/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <string>
#include <utility>

#include "evalfrl/tape.hpp"

namespace evalfrl::models {

namespace {

constexpr const char* kFamilyNames[] = {"mlp",    "debias", "ddc",
                                        "vfae",   "lfr",    "binary_mi",
                                        "det_binary_mi"};

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

Matrix binary_column(const std::vector<int>& v, const char* what) {
  Matrix col(long(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0 && v[i] != 1)
      throw ShapeError(std::string(what) + " values must be 0 or 1");
    col(long(i), 0) = double(v[i]);
  }
  return col;
}

std::vector<int> rows_with(const std::vector<int>& s, int value) {
  std::vector<int> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] == value) out.push_back(int(i));
  return out;
}

// x * W^T + broadcast bias row; biases are stored as 1 x out matrices
Matrix plain_affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix r = x * w.transpose();
  r.rowwise() += b.row(0);
  return r;
}

Matrix apply_act(const Matrix& z, nn::Activation a) {
  switch (a) {
    case nn::Activation::Tanh: return z.array().tanh();
    case nn::Activation::Sigmoid:
      return (0.5 * (z.array() * 0.5).tanh() + 0.5).matrix();
    case nn::Activation::Relu: return z.cwiseMax(0.0);
    case nn::Activation::Identity: return z;
  }
  throw ConfigError("unknown activation");
}

Matrix sigmoid_of(const Matrix& z) { return apply_act(z, nn::Activation::Sigmoid); }

Matrix run_chain(const nn::ParameterSet& theta, const std::string& prefix,
                 std::size_t count, nn::Activation act, Matrix h) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::string base = prefix + std::to_string(i);
    h = apply_act(plain_affine(h, theta.at(base + ".w"), theta.at(base + ".b")), act);
  }
  return h;
}

bool is_trunk_family(Family f) {
  return f == Family::Mlp || f == Family::Debias || f == Family::Ddc;
}

// trunk for mlp/debias/ddc: hidden chain then the representation layer,
// all under the spec activation
Matrix trunk_repr(const ModelSpec& spec, const nn::ParameterSet& theta, const Matrix& x) {
  Matrix h = run_chain(theta, "enc", spec.encoder_widths.size(), spec.activation, x);
  return apply_act(plain_affine(h, theta.at("repr.w"), theta.at("repr.b")), spec.activation);
}

std::pair<Matrix, Matrix> vfae_encode(const ModelSpec& spec, const nn::ParameterSet& theta,
                                      const Matrix& x, const Matrix& s_col) {
  Matrix xin(x.rows(), x.cols() + 1);
  xin << x, s_col;
  Matrix h = run_chain(theta, "enc", spec.encoder_widths.size(), spec.activation, xin);
  return {plain_affine(h, theta.at("mu.w"), theta.at("mu.b")),
          plain_affine(h, theta.at("logvar.w"), theta.at("logvar.b"))};
}

Matrix lfr_membership(const nn::ParameterSet& theta, const Matrix& x) {
  const Matrix& v = theta.at("prototypes");
  Matrix logits(x.rows(), v.rows());
  for (long i = 0; i < x.rows(); ++i)
    for (long k = 0; k < v.rows(); ++k)
      logits(i, k) = -(x.row(i) - v.row(k)).squaredNorm();
  Matrix m(logits.rows(), logits.cols());
  for (long i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - top).exp();
    m.row(i) = (e / e.sum()).matrix();
  }
  return m;
}

Matrix binary_probabilities(const ModelSpec& spec, const nn::ParameterSet& theta,
                            const Matrix& x) {
  Matrix h = run_chain(theta, "enc", spec.encoder_widths.size(), spec.activation, x);
  return sigmoid_of(plain_affine(h, theta.at("bits.w"), theta.at("bits.b")));
}

int expected_input_width(const ModelSpec& spec, const nn::ParameterSet& theta) {
  switch (spec.family) {
    case Family::Mlp:
    case Family::Debias:
    case Family::Ddc:
      return int(spec.encoder_widths.empty() ? theta.at("repr.w").cols()
                                             : theta.at("enc0.w").cols());
    case Family::Vfae:
      return int((spec.encoder_widths.empty() ? theta.at("mu.w").cols()
                                              : theta.at("enc0.w").cols()) - 1);
    case Family::Lfr: return int(theta.at("prototypes").cols());
    case Family::BinaryMi:
    case Family::DetBinaryMi:
      return int(spec.encoder_widths.empty() ? theta.at("bits.w").cols()
                                             : theta.at("enc0.w").cols());
  }
  throw ConfigError("unknown family");
}

// Graph under construction for one loss evaluation. The tape owns closures
// that point back at it, so this lives on the stack and is never moved.
struct Graph {
  const ModelSpec& spec;
  const NoiseBundle& bundle;
  tape::Tape t;
  std::map<std::string, tape::NodeId> leaf;
  std::vector<std::string> order;  // theta insertion order, for gradients
  tape::NodeId x = -1;
  Matrix x_val, y_col, s_col;
  std::vector<int> s_int, rows0, rows1;
  long n = 0;

  Graph(const ModelSpec& sp, const nn::ParameterSet& theta, const NoiseBundle& b)
      : spec(sp), bundle(b) {
    for (const auto& [name, value] : theta.items) {
      order.push_back(name);
      leaf.emplace(name, t.leaf(value));
    }
  }
  tape::NodeId p(const std::string& name) const { return leaf.at(name); }
};

double term_value(Graph& g, tape::NodeId node, const char* name) {
  const double v = g.t.value(node)(0, 0);
  if (!std::isfinite(v))
    throw NumericError(std::string("non-finite ") + name + " term");
  return v;
}

tape::NodeId affine_node(Graph& g, tape::NodeId h, const std::string& base) {
  return g.t.add_row(g.t.matmul(h, g.t.transpose(g.p(base + ".w"))), g.p(base + ".b"));
}

tape::NodeId chain_node(Graph& g, tape::NodeId h, const std::string& prefix,
                        std::size_t count, nn::Activation act) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::string base = prefix + std::to_string(i);
    h = nn::tape_layer(g.t, h, g.p(base + ".w"), g.p(base + ".b"), act);
  }
  return h;
}

tape::NodeId zero_scalar(Graph& g) { return g.t.constant(Matrix::Zero(1, 1)); }

// rbf_mmd2 between the two sensitive groups of z; empty group contributes 0
tape::NodeId group_mmd(Graph& g, tape::NodeId z, const char* term_name) {
  if (g.rows0.empty() || g.rows1.empty()) return zero_scalar(g);
  tape::NodeId z0 = g.t.select_rows(z, g.rows0);
  tape::NodeId z1 = g.t.select_rows(z, g.rows1);
  const double bw = g.bundle.bandwidth
                        ? *g.bundle.bandwidth
                        : nn::median_bandwidth(g.t.value(z0), g.t.value(z1));
  tape::NodeId m = g.t.rbf_mmd2(z0, z1, bw);
  term_value(g, m, term_name);
  return m;
}

tape::NodeId trunk_repr_node(Graph& g) {
  tape::NodeId h = chain_node(g, g.x, "enc", g.spec.encoder_widths.size(), g.spec.activation);
  return nn::tape_layer(g.t, h, g.p("repr.w"), g.p("repr.b"), g.spec.activation);
}

std::pair<tape::NodeId, tape::NodeId> build_mlp(Graph& g) {
  tape::NodeId z = trunk_repr_node(g);
  tape::NodeId task = g.t.bce_with_logits_mean(affine_node(g, z, "head"), g.y_col);
  term_value(g, task, "task");
  return {task, zero_scalar(g)};
}

std::pair<tape::NodeId, tape::NodeId> build_debias(Graph& g) {
  tape::NodeId z = trunk_repr_node(g);
  tape::NodeId task = g.t.bce_with_logits_mean(affine_node(g, z, "head"), g.y_col);
  term_value(g, task, "task");
  tape::NodeId a = g.t.grl(z, g.bundle.grl_lambda.value_or(1.0));
  a = chain_node(g, a, "adv", g.spec.adversary_widths.size(), g.spec.activation);
  tape::NodeId adv = g.t.bce_with_logits_mean(affine_node(g, a, "adv_out"), g.s_col);
  term_value(g, adv, "adversary");
  return {task, adv};
}

std::pair<tape::NodeId, tape::NodeId> build_ddc(Graph& g) {
  tape::NodeId z = trunk_repr_node(g);
  tape::NodeId task = g.t.bce_with_logits_mean(affine_node(g, z, "head"), g.y_col);
  term_value(g, task, "task");
  return {task, group_mmd(g, z, "mmd")};
}

std::pair<tape::NodeId, tape::NodeId> build_vfae(Graph& g) {
  const long m = g.spec.repr_width;
  if (g.bundle.vfae_eps.rows() != g.n || g.bundle.vfae_eps.cols() != m)
    throw ShapeError("vfae noise shape mismatch");
  Matrix xin(g.n, g.x_val.cols() + 1);
  xin << g.x_val, g.s_col;
  tape::NodeId h = chain_node(g, g.t.constant(xin), "enc",
                              g.spec.encoder_widths.size(), g.spec.activation);
  tape::NodeId mu = affine_node(g, h, "mu");
  tape::NodeId lv = affine_node(g, h, "logvar");
  tape::NodeId eps = g.t.constant(g.bundle.vfae_eps);
  tape::NodeId z = g.t.add(mu, g.t.hadamard(g.t.exp_op(g.t.scale(lv, 0.5)), eps));

  tape::NodeId dz = g.t.concat_cols(z, g.t.constant(g.s_col));
  tape::NodeId hd = chain_node(g, dz, "dec", g.spec.encoder_widths.size(),
                               g.spec.activation);
  tape::NodeId xhat = affine_node(g, hd, "recon");
  tape::NodeId recon = g.t.scale(
      g.t.sum(g.t.square_op(g.t.sub(xhat, g.x))), 0.5 / double(g.n));
  term_value(g, recon, "recon");

  // KL(N(mu, diag e^lv) || N(0, I)) averaged over the batch
  tape::NodeId kl = g.t.scale(
      g.t.sum(g.t.sub(g.t.add(g.t.square_op(mu), g.t.exp_op(lv)),
                      g.t.add_scalar(lv, 1.0))),
      0.5 / double(g.n));
  term_value(g, kl, "kl");

  tape::NodeId task = g.t.bce_with_logits_mean(affine_node(g, z, "head"), g.y_col);
  term_value(g, task, "task");

  tape::NodeId lc = g.t.add(g.t.add(recon, kl), task);
  return {lc, group_mmd(g, z, "mmd")};
}

std::pair<tape::NodeId, tape::NodeId> build_lfr(Graph& g) {
  tape::NodeId v = g.p("prototypes");
  tape::NodeId dist = g.t.pairwise_sqdist(g.x, v);
  tape::NodeId m = g.t.row_softmax(g.t.scale(dist, -1.0));

  tape::NodeId xhat = g.t.matmul(m, v);
  tape::NodeId lx = g.t.scale(g.t.sum(g.t.square_op(g.t.sub(xhat, g.x))),
                              1.0 / double(g.n));
  term_value(g, lx, "reconstruction");

  tape::NodeId ly = g.t.bce_with_logits_mean(g.t.matmul(m, g.p("head_w")), g.y_col);
  term_value(g, ly, "task");

  tape::NodeId lz;
  if (g.rows0.empty() || g.rows1.empty()) {
    lz = zero_scalar(g);
  } else {
    tape::NodeId m0 = g.t.col_mean(g.t.select_rows(m, g.rows0));
    tape::NodeId m1 = g.t.col_mean(g.t.select_rows(m, g.rows1));
    lz = g.t.sum(g.t.abs_op(g.t.sub(m1, m0)));
    term_value(g, lz, "parity");
  }
  return {g.t.add(ly, g.t.scale(lx, g.spec.lfr_recon_weight)), lz};
}

std::pair<tape::NodeId, tape::NodeId> build_binary(Graph& g) {
  const long m = g.spec.repr_width;
  tape::NodeId h = chain_node(g, g.x, "enc", g.spec.encoder_widths.size(),
                              g.spec.activation);
  tape::NodeId p = g.t.sigmoid_op(affine_node(g, h, "bits"));
  const Matrix& pv = g.t.value(p);

  Matrix residual;
  if (g.bundle.freeze_st) {
    if (g.bundle.st_residual.rows() != g.n || g.bundle.st_residual.cols() != m)
      throw ShapeError("straight-through residual shape mismatch");
    residual = g.bundle.st_residual;
  } else {
    Matrix sample(g.n, m);
    if (g.spec.family == Family::BinaryMi) {
      if (g.bundle.binary_u.rows() != g.n || g.bundle.binary_u.cols() != m)
        throw ShapeError("binary noise shape mismatch");
      for (long i = 0; i < g.n; ++i)
        for (long j = 0; j < m; ++j)
          sample(i, j) = g.bundle.binary_u(i, j) < pv(i, j) ? 1.0 : 0.0;
    } else {
      for (long i = 0; i < g.n; ++i)
        for (long j = 0; j < m; ++j) sample(i, j) = pv(i, j) >= 0.5 ? 1.0 : 0.0;
    }
    residual = sample - pv;
  }
  tape::NodeId code = g.t.straight_through(p, residual);

  tape::NodeId task = g.t.bce_with_logits_mean(affine_node(g, code, "head"), g.y_col);
  term_value(g, task, "task");

  tape::NodeId mi;
  if (g.rows0.empty() || g.rows1.empty()) {
    mi = zero_scalar(g);
  } else {
    mi = g.t.bernoulli_mi_bits(p, g.s_int);
    term_value(g, mi, "mi");
  }
  return {task, mi};
}

std::pair<tape::NodeId, tape::NodeId> build_family(Graph& g) {
  switch (g.spec.family) {
    case Family::Mlp: return build_mlp(g);
    case Family::Debias: return build_debias(g);
    case Family::Ddc: return build_ddc(g);
    case Family::Vfae: return build_vfae(g);
    case Family::Lfr: return build_lfr(g);
    case Family::BinaryMi:
    case Family::DetBinaryMi: return build_binary(g);
  }
  throw ConfigError("unknown family");
}

// shared front half of family_loss and loss_kink_margin
void prepare_graph(Graph& g, const nn::ParameterSet& theta, const Matrix& x,
                   const std::vector<int>& y, const std::vector<int>& s) {
  g.n = x.rows();
  if (g.n == 0) throw ShapeError("empty batch");
  if (long(y.size()) != g.n || long(s.size()) != g.n)
    throw ShapeError("label/sensitive length mismatch");
  if (int(x.cols()) != expected_input_width(g.spec, theta))
    throw ShapeError("feature width mismatch");
  if (!all_finite(x)) throw NumericError("non-finite features");
  g.x_val = x;
  g.x = g.t.constant(x);
  g.y_col = binary_column(y, "label");
  g.s_col = binary_column(s, "sensitive");
  g.s_int = s;
  g.rows0 = rows_with(s, 0);
  g.rows1 = rows_with(s, 1);
}

double parse_checkpoint_double(const std::string& text) {
  const char* begin = text.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end != begin + text.size()) throw ParseError("bad numeric literal: " + text);
  return v;
}

}  // namespace

const char* family_name(Family f) { return kFamilyNames[int(f)]; }

Family family_from_name(const std::string& name) {
  for (int i = 0; i < 7; ++i)
    if (name == kFamilyNames[i]) return Family(i);
  throw ConfigError("unknown model family: " + name);
}

const std::vector<Family>& all_families() {
  static const std::vector<Family> fams = {
      Family::Mlp,  Family::Debias,   Family::Ddc,        Family::Vfae,
      Family::Lfr,  Family::BinaryMi, Family::DetBinaryMi};
  return fams;
}

void ModelSpec::validate() const {
  if (repr_width < 1) throw ConfigError("representation width must be >= 1");
  for (int w : encoder_widths)
    if (w < 1) throw ConfigError("encoder widths must be >= 1");
  for (int w : adversary_widths)
    if (w < 1) throw ConfigError("adversary widths must be >= 1");
  if (activation != nn::Activation::Tanh && activation != nn::Activation::Relu)
    throw ConfigError("activation must be tanh or relu");
  if (optimizer != "adam" && optimizer != "sgd")
    throw ConfigError("optimizer must be adam or sgd");
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw ConfigError("learning rate must be positive");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!std::isfinite(lfr_recon_weight) || lfr_recon_weight < 0.0)
    throw ConfigError("reconstruction weight must be >= 0");
  if (family != Family::Debias && !adversary_widths.empty())
    throw ConfigError("adversary widths are a debias-only setting");
  if (family != Family::Lfr && lfr_recon_weight != 0.1)
    throw ConfigError("reconstruction weight is an lfr-only setting");
  if (family == Family::Lfr) {
    if (!encoder_widths.empty())
      throw ConfigError("lfr takes no encoder: prototypes act on raw features");
    if (activation != nn::Activation::Tanh)
      throw ConfigError("lfr uses no activation; leave it at the default");
  }
}

nlohmann::ordered_json ModelSpec::to_json() const {
  nlohmann::ordered_json j;
  j["family"] = family_name(family);
  j["encoder_widths"] = encoder_widths;
  j["repr_width"] = repr_width;
  j["activation"] = nn::activation_name(activation);
  j["adversary_widths"] = adversary_widths;
  j["lfr_recon_weight"] = lfr_recon_weight;
  j["optimizer"] = optimizer;
  j["lr"] = lr;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.family = family_from_name(j.at("family").get<std::string>());
  spec.encoder_widths = j.value("encoder_widths", std::vector<int>{});
  spec.repr_width = j.value("repr_width", 8);
  spec.activation = nn::activation_from_name(j.value("activation", std::string("tanh")));
  spec.adversary_widths = j.value("adversary_widths", std::vector<int>{});
  spec.lfr_recon_weight = j.value("lfr_recon_weight", 0.1);
  spec.optimizer = j.value("optimizer", std::string("adam"));
  spec.lr = j.value("lr", 0.001);
  spec.epochs = j.value("epochs", 60);
  spec.batch_size = j.value("batch_size", 64);
  spec.seed = j.value("seed", std::uint64_t{0});
  spec.validate();
  return spec;
}

nn::ParameterSet init_params(const ModelSpec& spec, int input_width) {
  spec.validate();
  if (input_width < 1) throw ShapeError("input width must be >= 1");
  Rng rng(derive_seed(spec.seed, "init"));
  nn::ParameterSet theta;
  const int m = spec.repr_width;

  auto add_layer = [&](const std::string& base, int in, int out) {
    theta.add(base + ".w", nn::glorot_init(out, in, rng));
    theta.add(base + ".b", Matrix::Zero(1, out));
  };
  auto add_chain = [&](const std::string& prefix, int in,
                       const std::vector<int>& widths) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
      add_layer(prefix + std::to_string(i), in, widths[i]);
      in = widths[i];
    }
    return in;
  };

  switch (spec.family) {
    case Family::Mlp:
    case Family::Ddc: {
      int w = add_chain("enc", input_width, spec.encoder_widths);
      add_layer("repr", w, m);
      add_layer("head", m, 1);
      break;
    }
    case Family::Debias: {
      int w = add_chain("enc", input_width, spec.encoder_widths);
      add_layer("repr", w, m);
      add_layer("head", m, 1);
      int a = add_chain("adv", m, spec.adversary_widths);
      add_layer("adv_out", a, 1);
      break;
    }
    case Family::Vfae: {
      int w = add_chain("enc", input_width + 1, spec.encoder_widths);
      add_layer("mu", w, m);
      add_layer("logvar", w, m);
      std::vector<int> rev(spec.encoder_widths.rbegin(), spec.encoder_widths.rend());
      int dw = add_chain("dec", m + 1, rev);
      add_layer("recon", dw, input_width);
      add_layer("head", m, 1);
      break;
    }
    case Family::Lfr: {
      theta.add("prototypes", nn::glorot_init(m, input_width, rng));
      theta.add("head_w", nn::glorot_init(m, 1, rng));
      break;
    }
    case Family::BinaryMi:
    case Family::DetBinaryMi: {
      int w = add_chain("enc", input_width, spec.encoder_widths);
      add_layer("bits", w, m);
      add_layer("head", m, 1);
      break;
    }
  }
  return theta;
}

NoiseBundle draw_noise(const ModelSpec& spec, const Matrix& x, std::uint64_t seed) {
  NoiseBundle bundle;
  const long n = x.rows();
  const long m = spec.repr_width;
  if (spec.family == Family::Vfae) {
    Rng rng(derive_seed(seed, "vfae_eps"));
    bundle.vfae_eps.resize(n, m);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < m; ++j) bundle.vfae_eps(i, j) = rng.normal();
  } else if (spec.family == Family::BinaryMi) {
    Rng rng(derive_seed(seed, "binary_u"));
    bundle.binary_u.resize(n, m);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < m; ++j) bundle.binary_u(i, j) = rng.next_double();
  }
  return bundle;
}

NoiseBundle frozen_noise(const ModelSpec& spec, const nn::ParameterSet& theta,
                         const Matrix& x, const std::vector<int>& s,
                         std::uint64_t seed) {
  NoiseBundle bundle = draw_noise(spec, x, seed);
  bundle.grl_lambda = -1.0;  // grl passes gradients through unflipped

  const std::vector<int> idx0 = rows_with(s, 0);
  const std::vector<int> idx1 = rows_with(s, 1);
  auto pin_bandwidth = [&](const Matrix& z) {
    bundle.bandwidth = (idx0.empty() || idx1.empty())
                           ? 1.0
                           : nn::median_bandwidth(take_rows(z, idx0), take_rows(z, idx1));
  };

  switch (spec.family) {
    case Family::Ddc:
      pin_bandwidth(trunk_repr(spec, theta, x));
      break;
    case Family::Vfae: {
      const Matrix s_col = binary_column(s, "sensitive");
      auto [mu, lv] = vfae_encode(spec, theta, x, s_col);
      const Matrix z =
          mu + ((lv * 0.5).array().exp() * bundle.vfae_eps.array()).matrix();
      pin_bandwidth(z);
      break;
    }
    case Family::BinaryMi:
    case Family::DetBinaryMi: {
      const Matrix p = binary_probabilities(spec, theta, x);
      Matrix sample(p.rows(), p.cols());
      for (long i = 0; i < p.rows(); ++i)
        for (long j = 0; j < p.cols(); ++j)
          sample(i, j) = spec.family == Family::BinaryMi
                             ? (bundle.binary_u(i, j) < p(i, j) ? 1.0 : 0.0)
                             : (p(i, j) >= 0.5 ? 1.0 : 0.0);
      bundle.st_residual = sample - p;
      bundle.freeze_st = true;
      break;
    }
    default: break;
  }
  return bundle;
}

double family_loss(const ModelSpec& spec, const nn::ParameterSet& theta,
                   const Matrix& x, const std::vector<int>& y,
                   const std::vector<int>& s, double gamma,
                   const NoiseBundle& bundle, nn::GradientRecord* record,
                   LossParts* parts) {
  spec.validate();
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw ConfigError("gamma must lie in [0,1]");
  Graph g(spec, theta, bundle);
  prepare_graph(g, theta, x, y, s);
  auto [lc, lf] = build_family(g);
  tape::NodeId combined =
      g.t.add(g.t.scale(lc, 1.0 - gamma), g.t.scale(lf, gamma));
  const double value = g.t.value(combined)(0, 0);
  if (!std::isfinite(value)) throw NumericError("non-finite combined loss");
  if (parts) {
    parts->l_class = g.t.value(lc)(0, 0);
    parts->l_fair = g.t.value(lf)(0, 0);
    parts->combined = value;
  }
  if (record) {
    g.t.backward(combined);
    record->grads.clear();
    record->grads.reserve(g.order.size());
    for (const std::string& name : g.order)
      record->grads.push_back(g.t.gradient(g.leaf.at(name)));
  }
  return value;
}

double loss_kink_margin(const ModelSpec& spec, const nn::ParameterSet& theta,
                        const Matrix& x, const std::vector<int>& y,
                        const std::vector<int>& s, double gamma,
                        const NoiseBundle& bundle) {
  spec.validate();
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw ConfigError("gamma must lie in [0,1]");
  Graph g(spec, theta, bundle);
  prepare_graph(g, theta, x, y, s);
  build_family(g);
  return g.t.min_kink_margin();
}

TrainedModel fit(const ModelSpec& spec, const data::PreparedDataset& train, double gamma) {
  spec.validate();
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw ConfigError("gamma must lie in [0,1]");
  if (train.n() == 0) throw ShapeError("empty training set");

  TrainedModel model;
  model.spec = spec;
  model.gamma = gamma;
  model.input_width = train.d();
  model.theta = init_params(spec, train.d());

  const int n = train.n();
  const int bs = std::min(spec.batch_size, n);
  const bool use_adam = spec.optimizer == "adam";
  nn::AdamState adam;
  nn::AdamHyper adam_hyper;
  adam_hyper.lr = spec.lr;
  nn::SgdHyper sgd_hyper;
  sgd_hyper.lr = spec.lr;

  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    const NoiseBundle noise =
        draw_noise(spec, train.features, derive_seed(spec.seed, "noise", std::uint64_t(epoch)));
    std::vector<int> order(static_cast<std::size_t>(n), 0);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(spec.seed, "order", std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    double lc_sum = 0.0, lf_sum = 0.0;
    for (int start = 0; start < n; start += bs) {
      const std::vector<int> batch(order.begin() + start,
                                   order.begin() + std::min(start + bs, n));
      NoiseBundle slice;
      if (noise.vfae_eps.size() > 0) slice.vfae_eps = take_rows(noise.vfae_eps, batch);
      if (noise.binary_u.size() > 0) slice.binary_u = take_rows(noise.binary_u, batch);

      nn::GradientRecord grads;
      LossParts parts;
      try {
        family_loss(spec, model.theta, take_rows(train.features, batch),
                    take(train.labels, batch), take(train.sensitive, batch),
                    gamma, slice, &grads, &parts);
        grads.check_finite();
        if (use_adam)
          nn::adam_step(model.theta, grads, adam, adam_hyper);
        else
          nn::sgd_step(model.theta, grads, sgd_hyper);
      } catch (const NumericError& err) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + err.what());
      }
      lc_sum += parts.l_class * double(batch.size());
      lf_sum += parts.l_fair * double(batch.size());
    }
    model.loss_trace.emplace_back(lc_sum / n, lf_sum / n);
  }
  return model;
}

std::vector<double> predict_scores(const TrainedModel& model, const Matrix& x,
                                   const std::vector<int>& s) {
  const ModelSpec& spec = model.spec;
  if (int(x.cols()) != model.input_width) throw ShapeError("feature width mismatch");
  if (long(s.size()) != x.rows()) throw ShapeError("sensitive length mismatch");
  if (!all_finite(x)) throw NumericError("non-finite features");

  Matrix logits;
  if (is_trunk_family(spec.family)) {
    logits = plain_affine(trunk_repr(spec, model.theta, x),
                          model.theta.at("head.w"), model.theta.at("head.b"));
  } else if (spec.family == Family::Vfae) {
    const Matrix s_col = binary_column(s, "sensitive");
    auto [mu, lv] = vfae_encode(spec, model.theta, x, s_col);
    (void)lv;
    logits = plain_affine(mu, model.theta.at("head.w"), model.theta.at("head.b"));
  } else if (spec.family == Family::Lfr) {
    logits = lfr_membership(model.theta, x) * model.theta.at("head_w");
  } else {
    const Matrix p = binary_probabilities(spec, model.theta, x);
    const Matrix code = (p.array() >= 0.5).cast<double>().matrix();
    logits = plain_affine(code, model.theta.at("head.w"), model.theta.at("head.b"));
  }

  const Matrix scores = sigmoid_of(logits);
  std::vector<double> out(std::size_t(scores.rows()));
  for (long i = 0; i < scores.rows(); ++i) out[std::size_t(i)] = scores(i, 0);
  return out;
}

Representation representations(const TrainedModel& model, const Matrix& x,
                               const std::vector<int>& s, std::uint64_t extraction_seed) {
  const ModelSpec& spec = model.spec;
  if (int(x.cols()) != model.input_width) throw ShapeError("feature width mismatch");
  if (long(s.size()) != x.rows()) throw ShapeError("sensitive length mismatch");
  if (!all_finite(x)) throw NumericError("non-finite features");

  Representation rep;
  rep.extraction_seed = extraction_seed;
  switch (spec.family) {
    case Family::Mlp:
    case Family::Debias:
    case Family::Ddc:
      rep.z = trunk_repr(spec, model.theta, x);
      rep.mode = "deterministic";
      break;
    case Family::Lfr:
      rep.z = lfr_membership(model.theta, x);
      rep.mode = "deterministic";
      break;
    case Family::Vfae: {
      const Matrix s_col = binary_column(s, "sensitive");
      auto [mu, lv] = vfae_encode(spec, model.theta, x, s_col);
      Rng rng(derive_seed(extraction_seed, "vfae_extract"));
      Matrix eps(mu.rows(), mu.cols());
      for (long i = 0; i < eps.rows(); ++i)
        for (long j = 0; j < eps.cols(); ++j) eps(i, j) = rng.normal();
      rep.z = mu + ((lv * 0.5).array().exp() * eps.array()).matrix();
      rep.mode = "sampled";
      break;
    }
    case Family::BinaryMi: {
      const Matrix p = binary_probabilities(spec, model.theta, x);
      Rng rng(derive_seed(extraction_seed, "binary_extract"));
      rep.z.resize(p.rows(), p.cols());
      for (long i = 0; i < p.rows(); ++i)
        for (long j = 0; j < p.cols(); ++j)
          rep.z(i, j) = rng.next_double() < p(i, j) ? 1.0 : 0.0;
      rep.mode = "sampled";
      break;
    }
    case Family::DetBinaryMi: {
      const Matrix p = binary_probabilities(spec, model.theta, x);
      rep.z = (p.array() >= 0.5).cast<double>().matrix();
      rep.mode = "hard-threshold";
      break;
    }
  }
  if (!all_finite(rep.z)) throw NumericError("non-finite representation");
  return rep;
}

nlohmann::ordered_json checkpoint_json(const TrainedModel& model) {
  nlohmann::ordered_json j;
  j["spec"] = model.spec.to_json();
  j["input_width"] = model.input_width;
  j["gamma"] = format_double(model.gamma);
  nlohmann::ordered_json trace = nlohmann::ordered_json::array();
  for (const auto& [lc, lf] : model.loss_trace)
    trace.push_back({format_double(lc), format_double(lf)});
  j["loss_trace"] = std::move(trace);
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (const auto& [name, value] : model.theta.items) {
    nlohmann::ordered_json p;
    p["name"] = name;
    p["rows"] = value.rows();
    p["cols"] = value.cols();
    nlohmann::ordered_json data = nlohmann::ordered_json::array();
    for (long r = 0; r < value.rows(); ++r)
      for (long c = 0; c < value.cols(); ++c)
        data.push_back(format_double(value(r, c)));
    p["data"] = std::move(data);
    params.push_back(std::move(p));
  }
  j["parameters"] = std::move(params);
  return j;
}

TrainedModel checkpoint_from_json(const nlohmann::json& j) {
  TrainedModel model;
  model.spec = ModelSpec::from_json(j.at("spec"));
  model.input_width = j.at("input_width").get<int>();
  model.gamma = parse_checkpoint_double(j.at("gamma").get<std::string>());
  for (const auto& pair : j.at("loss_trace"))
    model.loss_trace.emplace_back(parse_checkpoint_double(pair.at(0).get<std::string>()),
                                  parse_checkpoint_double(pair.at(1).get<std::string>()));
  for (const auto& p : j.at("parameters")) {
    const long rows = p.at("rows").get<long>();
    const long cols = p.at("cols").get<long>();
    const auto& data = p.at("data");
    if (long(data.size()) != rows * cols)
      throw ParseError("parameter array size mismatch");
    Matrix value(rows, cols);
    long k = 0;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c)
        value(r, c) = parse_checkpoint_double(data.at(k++).get<std::string>());
    model.theta.add(p.at("name").get<std::string>(), std::move(value));
  }
  return model;
}

}  // namespace evalfrl::models
