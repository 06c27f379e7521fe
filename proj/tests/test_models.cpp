#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "evalfrl/metrics.hpp"
#include "evalfrl/models.hpp"
#include "evalfrl/nn.hpp"

using namespace evalfrl;
using models::Family;
using models::ModelSpec;

namespace {

struct Toy {
  Matrix x;
  std::vector<int> y, s;
};

// random batch with both classes and both groups present
Toy micro_data(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  Toy t;
  t.x.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) t.x(i, j) = rng.normal();
  t.y.resize(n);
  t.s.resize(n);
  for (int i = 0; i < n; ++i) {
    t.y[i] = i < n / 2 ? 0 : 1;
    t.s[i] = i % 2;
  }
  rng.shuffle(t.y);
  rng.shuffle(t.s);
  t.y[0] = 0;
  t.y[1] = 1;
  t.s[0] = 0;
  t.s[1] = 1;
  return t;
}

ModelSpec micro_spec(Family f, std::uint64_t seed) {
  ModelSpec spec;
  spec.family = f;
  spec.repr_width = 3;
  spec.seed = seed;
  if (f == Family::Debias) spec.adversary_widths = {4};
  if (f != Family::Lfr) spec.encoder_widths = {5};
  return spec;
}

data::PreparedDataset as_prepared(const Toy& t) {
  data::PreparedDataset p;
  p.features = t.x;
  p.labels = t.y;
  p.sensitive = t.s;
  return p;
}

double logit(double q) { return std::log(q / (1.0 - q)); }

bool same_matrix(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

}  // namespace

TEST_CASE("family names round-trip") {
  for (Family f : models::all_families())
    CHECK(models::family_from_name(models::family_name(f)) == f);
  CHECK_THROWS_AS(models::family_from_name("resnet"), ConfigError);
  CHECK(models::all_families().size() == 7);
}

TEST_CASE("spec validation rejects unused or malformed settings") {
  ModelSpec ok = micro_spec(Family::Mlp, 1);
  CHECK_NOTHROW(ok.validate());

  ModelSpec bad = ok;
  bad.repr_width = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = ok;
  bad.adversary_widths = {4};
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // adversary is debias-only

  bad = ok;
  bad.lfr_recon_weight = 0.2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);  // recon weight is lfr-only

  bad = micro_spec(Family::Lfr, 1);
  bad.encoder_widths = {5};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = ok;
  bad.activation = nn::Activation::Sigmoid;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = ok;
  bad.optimizer = "rmsprop";
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = ok;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = ok;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("spec json round-trip") {
  ModelSpec spec = micro_spec(Family::Debias, 99);
  spec.activation = nn::Activation::Relu;
  spec.optimizer = "sgd";
  spec.lr = 0.05;
  spec.epochs = 7;
  spec.batch_size = 16;
  ModelSpec back = ModelSpec::from_json(spec.to_json());
  CHECK(back.family == spec.family);
  CHECK(back.encoder_widths == spec.encoder_widths);
  CHECK(back.repr_width == spec.repr_width);
  CHECK(back.activation == spec.activation);
  CHECK(back.adversary_widths == spec.adversary_widths);
  CHECK(back.optimizer == spec.optimizer);
  CHECK(back.lr == spec.lr);
  CHECK(back.epochs == spec.epochs);
  CHECK(back.batch_size == spec.batch_size);
  CHECK(back.seed == spec.seed);
}

TEST_CASE("combined loss is the gamma-weighted sum for every family") {
  const Toy t = micro_data(10, 3, 41);
  for (Family f : models::all_families()) {
    const ModelSpec spec = micro_spec(f, 7);
    const nn::ParameterSet theta = models::init_params(spec, 3);
    const models::NoiseBundle noise = models::draw_noise(spec, t.x, 5);
    for (double gamma : {0.0, 0.1, 0.3, 0.5, 0.9, 1.0}) {
      models::LossParts parts;
      const double value = models::family_loss(spec, theta, t.x, t.y, t.s,
                                               gamma, noise, nullptr, &parts);
      CHECK(value == parts.combined);
      CHECK(std::abs(value - ((1.0 - gamma) * parts.l_class +
                              gamma * parts.l_fair)) <= 1e-12);
      CHECK(std::isfinite(parts.l_class));
      CHECK(std::isfinite(parts.l_fair));
    }
  }
}

TEST_CASE("mlp fair loss is identically zero") {
  const Toy t = micro_data(8, 2, 3);
  const ModelSpec spec = micro_spec(Family::Mlp, 11);
  const nn::ParameterSet theta = models::init_params(spec, 2);
  models::LossParts parts;
  models::family_loss(spec, theta, t.x, t.y, t.s, 0.7, {}, nullptr, &parts);
  CHECK(parts.l_fair == 0.0);
}

TEST_CASE("silent adversary costs exactly ln 2") {
  const Toy t = micro_data(12, 3, 17);
  const ModelSpec spec = micro_spec(Family::Debias, 2);
  nn::ParameterSet theta = models::init_params(spec, 3);
  theta.at("adv_out.w").setZero();  // adversary emits logit 0 -> sigma = 0.5
  theta.at("adv_out.b").setZero();
  models::LossParts parts;
  models::family_loss(spec, theta, t.x, t.y, t.s, 0.5, {}, nullptr, &parts);
  CHECK(parts.l_fair == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("group confusion loss reproduces the singleton kernel value") {
  // relu trunk with identity weights on positive inputs: representations 1, 3
  ModelSpec spec;
  spec.family = Family::Ddc;
  spec.repr_width = 1;
  spec.activation = nn::Activation::Relu;
  spec.seed = 4;
  nn::ParameterSet theta = models::init_params(spec, 1);
  theta.at("repr.w") = Matrix::Constant(1, 1, 1.0);
  theta.at("repr.b").setZero();
  Matrix x(2, 1);
  x << 1.0, 3.0;
  models::NoiseBundle noise;
  noise.bandwidth = std::sqrt(2.0);
  models::LossParts parts;
  models::family_loss(spec, theta, x, {0, 1}, {0, 1}, 0.5, noise, nullptr, &parts);
  CHECK(parts.l_fair ==
        doctest::Approx(2.0 - 2.0 * std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("batches with one sensitive group contribute zero fair loss") {
  Toy t = micro_data(8, 2, 23);
  std::fill(t.s.begin(), t.s.end(), 0);
  for (Family f : {Family::Ddc, Family::Lfr, Family::Vfae, Family::BinaryMi,
                   Family::DetBinaryMi}) {
    const ModelSpec spec = micro_spec(f, 31);
    const nn::ParameterSet theta = models::init_params(spec, 2);
    const models::NoiseBundle noise = models::draw_noise(spec, t.x, 9);
    models::LossParts parts;
    nn::GradientRecord grads;
    models::family_loss(spec, theta, t.x, t.y, t.s, 0.5, noise, &grads, &parts);
    CHECK(parts.l_fair == 0.0);
    CHECK_NOTHROW(grads.check_finite());
  }
}

TEST_CASE("unit-mean unit-variance posterior costs half a nat per dimension") {
  // no encoder hiddens; mu forced to 1, logvar to 0, recon and head silenced,
  // x = 0 so reconstruction is exact: L_class = 0 + 0.5*m + ln 2
  ModelSpec spec;
  spec.family = Family::Vfae;
  spec.repr_width = 2;
  spec.seed = 5;
  nn::ParameterSet theta = models::init_params(spec, 3);
  theta.at("mu.w").setZero();
  theta.at("mu.b").setConstant(1.0);
  theta.at("logvar.w").setZero();
  theta.at("logvar.b").setZero();
  theta.at("recon.w").setZero();
  theta.at("recon.b").setZero();
  theta.at("head.w").setZero();
  theta.at("head.b").setZero();
  const Matrix x = Matrix::Zero(6, 3);
  const std::vector<int> y = {0, 1, 0, 1, 0, 1};
  const std::vector<int> s = {0, 0, 0, 1, 1, 1};
  const models::NoiseBundle noise = models::draw_noise(spec, x, 8);
  models::LossParts parts;
  models::family_loss(spec, theta, x, y, s, 0.0, noise, nullptr, &parts);
  CHECK(parts.l_class ==
        doctest::Approx(0.5 * 2 + std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("prototype membership matches the two-point softmax") {
  ModelSpec spec;
  spec.family = Family::Lfr;
  spec.repr_width = 2;
  spec.seed = 6;
  nn::ParameterSet theta = models::init_params(spec, 1);
  theta.at("prototypes") << 0.0, 1.0;
  models::TrainedModel model;
  model.spec = spec;
  model.input_width = 1;
  model.theta = theta;
  const Matrix x = Matrix::Zero(1, 1);
  const models::Representation rep = models::representations(model, x, {0}, 1);
  CHECK(rep.z(0, 0) == doctest::Approx(0.7310585786300049).epsilon(1e-9));
  CHECK(rep.z(0, 1) == doctest::Approx(0.2689414213699951).epsilon(1e-9));
  CHECK(rep.mode == "deterministic");
}

TEST_CASE("binary information penalty matches the exact table values") {
  // one neuron, p = sigmoid(x): group means 0.2 and 0.8 give the 2x2 joint
  // [[0.4,0.1],[0.1,0.4]]
  ModelSpec spec;
  spec.family = Family::DetBinaryMi;
  spec.repr_width = 1;
  spec.seed = 12;
  nn::ParameterSet theta = models::init_params(spec, 1);
  theta.at("bits.w") = Matrix::Constant(1, 1, 1.0);
  theta.at("bits.b").setZero();
  Matrix x(4, 1);
  x << logit(0.1), logit(0.3), logit(0.7), logit(0.9);
  const std::vector<int> y = {0, 1, 0, 1};
  const std::vector<int> s = {0, 0, 1, 1};
  models::LossParts parts;
  models::family_loss(spec, theta, x, y, s, 0.5, {}, nullptr, &parts);
  CHECK(parts.l_fair == doctest::Approx(0.2780719051126377).epsilon(1e-9));

  // the stochastic sibling scores the same penalty: it reads probabilities,
  // not samples
  ModelSpec spec2 = spec;
  spec2.family = Family::BinaryMi;
  const models::NoiseBundle noise = models::draw_noise(spec2, x, 3);
  models::LossParts parts2;
  models::family_loss(spec2, theta, x, y, s, 0.5, noise, nullptr, &parts2);
  CHECK(parts2.l_fair == parts.l_fair);
}

TEST_CASE("saturated binary neuron copying s carries one bit") {
  ModelSpec spec;
  spec.family = Family::DetBinaryMi;
  spec.repr_width = 1;
  spec.seed = 13;
  nn::ParameterSet theta = models::init_params(spec, 1);
  theta.at("bits.w") = Matrix::Constant(1, 1, 50.0);
  theta.at("bits.b") = Matrix::Constant(1, 1, -25.0);
  Matrix x(4, 1);
  x << 0.0, 0.0, 1.0, 1.0;
  models::LossParts parts;
  models::family_loss(spec, theta, x, {0, 1, 0, 1}, {0, 0, 1, 1}, 1.0, {},
                      nullptr, &parts);
  CHECK(parts.l_fair == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("adversary gradient flips sign through the reversal layer only") {
  const Toy t = micro_data(10, 3, 53);
  const ModelSpec spec = micro_spec(Family::Debias, 21);
  const nn::ParameterSet theta = models::init_params(spec, 3);

  nn::GradientRecord flipped, plain;
  models::NoiseBundle noise;  // training: lambda = 1
  models::family_loss(spec, theta, t.x, t.y, t.s, 1.0, noise, &flipped, nullptr);
  noise.grl_lambda = -1.0;  // pass-through
  models::family_loss(spec, theta, t.x, t.y, t.s, 1.0, noise, &plain, nullptr);

  for (std::size_t i = 0; i < theta.items.size(); ++i) {
    const std::string& name = theta.items[i].first;
    if (name.rfind("adv", 0) == 0) {
      CHECK(same_matrix(flipped.grads[i], plain.grads[i]));
    } else {
      CHECK(same_matrix(flipped.grads[i], Matrix(-plain.grads[i])));
    }
  }
}

TEST_CASE("at gamma one the vfae gradient lives in the group-distance path") {
  const Toy t = micro_data(12, 3, 57);
  const ModelSpec spec = micro_spec(Family::Vfae, 22);
  const nn::ParameterSet theta = models::init_params(spec, 3);
  const models::NoiseBundle noise = models::draw_noise(spec, t.x, 4);
  nn::GradientRecord grads;
  models::family_loss(spec, theta, t.x, t.y, t.s, 1.0, noise, &grads, nullptr);
  for (std::size_t i = 0; i < theta.items.size(); ++i) {
    const std::string& name = theta.items[i].first;
    if (name.rfind("recon", 0) == 0 || name.rfind("dec", 0) == 0 ||
        name.rfind("head", 0) == 0) {
      CHECK(grads.grads[i].isZero(0.0));
    }
  }
}

TEST_CASE("frozen-noise gradient checks pass for every family") {
  for (Family f : models::all_families()) {
    int accepted = 0;
    std::uint64_t trial = 0;
    while (accepted < 6 && trial < 200) {
      const std::uint64_t seed = derive_seed(900, models::family_name(f), trial);
      ++trial;
      Rng rng(seed);
      ModelSpec spec = micro_spec(f, seed);
      spec.repr_width = 2 + int(rng.below(3));
      if (f != Family::Lfr) {
        spec.encoder_widths = rng.bernoulli(0.5) ? std::vector<int>{4}
                                                 : std::vector<int>{3, 3};
        if (rng.bernoulli(0.3)) spec.activation = nn::Activation::Relu;
      }
      const int d = 2 + int(rng.below(3));
      const int n = 6 + int(rng.below(6));
      const Toy t = micro_data(n, d, rng.next_u64());
      const nn::ParameterSet theta = models::init_params(spec, d);
      const double gamma = rng.bernoulli(0.5) ? 0.3 : 0.7;
      const models::NoiseBundle noise =
          models::frozen_noise(spec, theta, t.x, t.s, rng.next_u64());
      if (models::loss_kink_margin(spec, theta, t.x, t.y, t.s, gamma, noise) <
          1e-3)
        continue;
      auto loss = [&](const nn::ParameterSet& th, nn::GradientRecord* rec) {
        return models::family_loss(spec, th, t.x, t.y, t.s, gamma, noise, rec,
                                   nullptr);
      };
      const double err = nn::grad_check(loss, theta, 1e-5);
      INFO(models::family_name(f), " trial ", trial - 1, " err ", err);
      CHECK(err < 1e-4);
      ++accepted;
    }
    CHECK(accepted == 6);
  }
}

TEST_CASE("refits are bit-identical") {
  const Toy t = micro_data(30, 3, 71);
  const data::PreparedDataset train = as_prepared(t);
  for (Family f : {Family::Mlp, Family::Vfae, Family::BinaryMi, Family::Lfr}) {
    ModelSpec spec = micro_spec(f, 77);
    spec.epochs = 3;
    spec.batch_size = 8;
    const models::TrainedModel a = models::fit(spec, train, 0.4);
    const models::TrainedModel b = models::fit(spec, train, 0.4);
    REQUIRE(a.theta.items.size() == b.theta.items.size());
    for (std::size_t i = 0; i < a.theta.items.size(); ++i)
      CHECK(same_matrix(a.theta.items[i].second, b.theta.items[i].second));
    CHECK(a.loss_trace == b.loss_trace);
    CHECK(a.loss_trace.size() == 3);
    CHECK(a.gamma == 0.4);
  }
}

TEST_CASE("task training succeeds on a linearly separable toy set") {
  const int n = 200;
  Rng rng(404);
  Matrix x(n, 2);
  std::vector<int> y(n), s(n);
  for (int i = 0; i < n; ++i) {
    double margin;
    do {
      x(i, 0) = rng.uniform(-1.0, 1.0);
      x(i, 1) = rng.uniform(-1.0, 1.0);
      margin = x(i, 0) + x(i, 1);
    } while (std::abs(margin) < 0.2);
    y[i] = margin > 0 ? 1 : 0;
    s[i] = rng.bernoulli(0.5) ? 1 : 0;
  }
  // brute-force check that the rule w=(1,1) separates the sample perfectly
  for (int i = 0; i < n; ++i) CHECK(y[i] == (x(i, 0) + x(i, 1) > 0 ? 1 : 0));

  data::PreparedDataset train;
  train.features = x;
  train.labels = y;
  train.sensitive = s;

  ModelSpec spec = micro_spec(Family::Mlp, 31);
  spec.repr_width = 4;
  spec.epochs = 40;
  spec.lr = 0.01;
  const models::TrainedModel model = models::fit(spec, train, 0.0);
  CHECK(model.loss_trace.back().first <= model.loss_trace.front().first);
  const std::vector<double> scores = models::predict_scores(model, x, s);
  CHECK(metrics::auc(scores, y) >= 0.95);
}

TEST_CASE("at gamma one the debias task head never trains") {
  const Toy t = micro_data(40, 3, 83);
  ModelSpec spec = micro_spec(Family::Debias, 19);
  spec.epochs = 5;
  spec.batch_size = 10;
  const nn::ParameterSet init = models::init_params(spec, 3);
  const models::TrainedModel model = models::fit(spec, as_prepared(t), 1.0);
  CHECK(same_matrix(model.theta.at("head.w"), init.at("head.w")));
  CHECK(same_matrix(model.theta.at("head.b"), init.at("head.b")));
  // encoder does move (the adversary path reaches it)
  CHECK_FALSE(same_matrix(model.theta.at("repr.w"), init.at("repr.w")));

  const std::vector<double> scores = models::predict_scores(model, t.x, t.s);
  double mean = 0;
  for (double v : scores) mean += v;
  mean /= double(scores.size());
  CHECK(mean > 0.2);
  CHECK(mean < 0.8);
}

TEST_CASE("zeroed heads score one half everywhere") {
  const Toy t = micro_data(9, 2, 91);
  for (Family f : models::all_families()) {
    const ModelSpec spec = micro_spec(f, 44);
    models::TrainedModel model;
    model.spec = spec;
    model.input_width = 2;
    model.theta = models::init_params(spec, 2);
    if (f == Family::Lfr) {
      model.theta.at("head_w").setZero();
    } else {
      model.theta.at("head.w").setZero();
      model.theta.at("head.b").setZero();
    }
    for (double v : models::predict_scores(model, t.x, t.s)) CHECK(v == 0.5);
  }
}

TEST_CASE("scores stay strictly inside the unit interval") {
  const Toy t = micro_data(15, 3, 97);
  for (Family f : models::all_families()) {
    models::TrainedModel model;
    model.spec = micro_spec(f, 45);
    model.input_width = 3;
    model.theta = models::init_params(model.spec, 3);
    for (double v : models::predict_scores(model, t.x, t.s)) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  models::TrainedModel model;
  model.spec = micro_spec(Family::Mlp, 45);
  model.input_width = 3;
  model.theta = models::init_params(model.spec, 3);
  CHECK_THROWS_AS(models::predict_scores(model, Matrix::Zero(4, 5), {0, 1, 0, 1}),
                  ShapeError);
}

TEST_CASE("representation contracts per family") {
  const Toy base = micro_data(14, 3, 101);
  Toy t = base;
  t.x.row(4) = t.x.row(2);  // duplicate input row for determinism probes
  t.s[4] = t.s[2];
  for (Family f : models::all_families()) {
    models::TrainedModel model;
    model.spec = micro_spec(f, 46);
    model.input_width = 3;
    model.theta = models::init_params(model.spec, 3);
    const models::Representation rep = models::representations(model, t.x, t.s, 500);
    CHECK(rep.z.rows() == t.x.rows());
    CHECK(rep.z.cols() == model.spec.repr_width);
    CHECK(all_finite(rep.z));
    CHECK(rep.extraction_seed == 500);

    switch (f) {
      case Family::Mlp:
      case Family::Debias:
      case Family::Ddc:
        CHECK(rep.mode == "deterministic");
        CHECK(rep.z.row(4) == rep.z.row(2));
        break;
      case Family::Lfr: {
        CHECK(rep.mode == "deterministic");
        CHECK(rep.z.row(4) == rep.z.row(2));
        CHECK(rep.z.minCoeff() >= 0.0);
        for (long i = 0; i < rep.z.rows(); ++i)
          CHECK(rep.z.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
        break;
      }
      case Family::Vfae: {
        CHECK(rep.mode == "sampled");
        const models::Representation again =
            models::representations(model, t.x, t.s, 500);
        CHECK(same_matrix(rep.z, again.z));
        const models::Representation other =
            models::representations(model, t.x, t.s, 501);
        CHECK_FALSE(same_matrix(rep.z, other.z));
        break;
      }
      case Family::BinaryMi: {
        CHECK(rep.mode == "sampled");
        for (long i = 0; i < rep.z.size(); ++i)
          CHECK((rep.z(i) == 0.0 || rep.z(i) == 1.0));
        const models::Representation again =
            models::representations(model, t.x, t.s, 500);
        CHECK(same_matrix(rep.z, again.z));
        break;
      }
      case Family::DetBinaryMi: {
        CHECK(rep.mode == "hard-threshold");
        for (long i = 0; i < rep.z.size(); ++i)
          CHECK((rep.z(i) == 0.0 || rep.z(i) == 1.0));
        CHECK(rep.z.row(4) == rep.z.row(2));
        break;
      }
    }
  }
}

TEST_CASE("binary siblings share parameter shapes") {
  ModelSpec a = micro_spec(Family::BinaryMi, 3);
  ModelSpec b = a;
  b.family = Family::DetBinaryMi;
  const nn::ParameterSet ta = models::init_params(a, 5);
  const nn::ParameterSet tb = models::init_params(b, 5);
  REQUIRE(ta.items.size() == tb.items.size());
  for (std::size_t i = 0; i < ta.items.size(); ++i) {
    CHECK(ta.items[i].first == tb.items[i].first);
    CHECK(ta.items[i].second.rows() == tb.items[i].second.rows());
    CHECK(ta.items[i].second.cols() == tb.items[i].second.cols());
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const Toy t = micro_data(20, 3, 111);
  ModelSpec spec = micro_spec(Family::Vfae, 55);
  spec.epochs = 2;
  spec.batch_size = 8;
  const models::TrainedModel model = models::fit(spec, as_prepared(t), 0.3);
  const std::string text = models::checkpoint_json(model).dump();
  const models::TrainedModel back =
      models::checkpoint_from_json(nlohmann::json::parse(text));
  CHECK(back.input_width == model.input_width);
  CHECK(back.gamma == model.gamma);
  CHECK(back.loss_trace == model.loss_trace);
  REQUIRE(back.theta.items.size() == model.theta.items.size());
  for (std::size_t i = 0; i < model.theta.items.size(); ++i) {
    CHECK(back.theta.items[i].first == model.theta.items[i].first);
    CHECK(same_matrix(back.theta.items[i].second, model.theta.items[i].second));
  }
  // a reloaded checkpoint scores identically
  CHECK(models::predict_scores(back, t.x, t.s) ==
        models::predict_scores(model, t.x, t.s));
}

TEST_CASE("noise draws are deterministic and well-shaped") {
  const ModelSpec vfae = micro_spec(Family::Vfae, 1);
  const ModelSpec bin = micro_spec(Family::BinaryMi, 1);
  const Matrix x = Matrix::Zero(7, 2);
  const models::NoiseBundle a = models::draw_noise(vfae, x, 42);
  const models::NoiseBundle b = models::draw_noise(vfae, x, 42);
  CHECK(a.vfae_eps.rows() == 7);
  CHECK(a.vfae_eps.cols() == vfae.repr_width);
  CHECK(same_matrix(a.vfae_eps, b.vfae_eps));
  const models::NoiseBundle c = models::draw_noise(bin, x, 42);
  CHECK(c.binary_u.rows() == 7);
  CHECK(c.binary_u.minCoeff() >= 0.0);
  CHECK(c.binary_u.maxCoeff() < 1.0);
  CHECK(models::draw_noise(micro_spec(Family::Mlp, 1), x, 42).vfae_eps.size() == 0);
}

TEST_CASE("divergence names the epoch") {
  const Toy t = micro_data(10, 2, 121);
  ModelSpec spec = micro_spec(Family::Lfr, 66);
  spec.lr = 1e160;  // first step throws the prototypes to ~1e160
  spec.epochs = 4;
  spec.batch_size = 10;
  try {
    models::fit(spec, as_prepared(t), 0.2);
    FAIL("expected divergence");
  } catch (const NumericError& err) {
    const std::string what = err.what();
    CHECK(what.find("epoch") != std::string::npos);
    CHECK(what.find("term") != std::string::npos);
  }
}

TEST_CASE("malformed inputs are rejected") {
  const ModelSpec spec = micro_spec(Family::Mlp, 1);
  const nn::ParameterSet theta = models::init_params(spec, 2);
  Matrix bad = Matrix::Zero(4, 2);
  bad(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(models::family_loss(spec, theta, bad, {0, 1, 0, 1},
                                      {0, 0, 1, 1}, 0.5, {}, nullptr, nullptr),
                  NumericError);
  CHECK_THROWS_AS(models::family_loss(spec, theta, Matrix::Zero(4, 3),
                                      {0, 1, 0, 1}, {0, 0, 1, 1}, 0.5, {},
                                      nullptr, nullptr),
                  ShapeError);
  CHECK_THROWS_AS(models::family_loss(spec, theta, Matrix::Zero(4, 2),
                                      {0, 1, 0, 2}, {0, 0, 1, 1}, 0.5, {},
                                      nullptr, nullptr),
                  ShapeError);
  CHECK_THROWS_AS(models::family_loss(spec, theta, Matrix::Zero(4, 2),
                                      {0, 1, 0, 1}, {0, 0, 1, 1}, 1.5, {},
                                      nullptr, nullptr),
                  ConfigError);
  const ModelSpec vfae = micro_spec(Family::Vfae, 1);
  const nn::ParameterSet vt = models::init_params(vfae, 2);
  CHECK_THROWS_AS(models::family_loss(vfae, vt, Matrix::Zero(4, 2), {0, 1, 0, 1},
                                      {0, 0, 1, 1}, 0.5, {}, nullptr, nullptr),
                  ShapeError);  // missing posterior noise
}
