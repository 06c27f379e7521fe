#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evalfrl/common.hpp"
#include "evalfrl/dataset.hpp"
#include "evalfrl/nn.hpp"

namespace evalfrl::models {

enum class Family { Mlp, Debias, Ddc, Vfae, Lfr, BinaryMi, DetBinaryMi };

const char* family_name(Family f);
Family family_from_name(const std::string& name);
const std::vector<Family>& all_families();

// Architecture and training settings for one model. repr_width is the width
// of the extracted representation: hidden units for the network families, the
// latent dimension for vfae, the prototype count for lfr, the number of
// binary neurons for the binary families. Families reject settings they do
// not use (validate()).
struct ModelSpec {
  Family family = Family::Mlp;
  std::vector<int> encoder_widths;   // hidden widths before the representation
  int repr_width = 8;
  nn::Activation activation = nn::Activation::Tanh;  // tanh or relu
  std::vector<int> adversary_widths;  // debias only: adversary hidden widths
  double lfr_recon_weight = 0.1;      // lfr only: weight of L_x inside L_class
  std::string optimizer = "adam";     // adam or sgd
  double lr = 0.001;
  int epochs = 60;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  nlohmann::ordered_json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

// Per-fit stochastic state, drawn once per epoch over all rows and sliced per
// batch. The gradient gate freezes the straight-through residual and the MMD
// bandwidth so the loss is a smooth function of the parameters around the
// build point, and flips the reversal layer to an identity (its sign contract
// is covered by its own test); training leaves those fields unset.
struct NoiseBundle {
  Matrix vfae_eps;                  // rows x repr_width
  Matrix binary_u;                  // rows x repr_width
  bool freeze_st = false;
  Matrix st_residual;               // rows x repr_width: code - p at freeze time
  std::optional<double> bandwidth;  // fixed MMD bandwidth when set
  std::optional<double> grl_lambda; // reversal strength override (training: 1)
};

struct LossParts {
  double l_class = 0;
  double l_fair = 0;
  double combined = 0;
};

struct TrainedModel {
  ModelSpec spec;
  int input_width = 0;
  double gamma = 0;
  nn::ParameterSet theta;
  std::vector<std::pair<double, double>> loss_trace;  // per epoch (L_class, L_fair)
};

struct Representation {
  Matrix z;          // rows x repr_width
  std::string mode;  // deterministic | sampled | hard-threshold
  std::uint64_t extraction_seed = 0;
};

// Seeded parameter initialization for the family's architecture.
nn::ParameterSet init_params(const ModelSpec& spec, int input_width);

// Noise for one pass over x: Gaussian draws for vfae, uniforms for binary_mi.
NoiseBundle draw_noise(const ModelSpec& spec, const Matrix& x, std::uint64_t seed);

// Bundle for finite-difference gradient gates: the straight-through residual
// and the MMD bandwidth are pinned at theta so the loss is smooth around it,
// and the reversal layer passes gradients through unflipped (the flip itself
// has a dedicated test).
NoiseBundle frozen_noise(const ModelSpec& spec, const nn::ParameterSet& theta,
                         const Matrix& x, const std::vector<int>& s,
                         std::uint64_t seed);

// Distance of the forward pass to the nearest gradient kink (relu, abs, the
// MI probability boundary). Gradient gates re-sample configurations where a
// difference probe would straddle one.
double loss_kink_margin(const ModelSpec& spec, const nn::ParameterSet& theta,
                        const Matrix& x, const std::vector<int>& y,
                        const std::vector<int>& s, double gamma,
                        const NoiseBundle& bundle);

// (1-gamma) * L_class + gamma * L_fair over the given rows. Throws
// NumericError naming the offending term when any part is non-finite. When
// record is non-null it is filled with the analytic gradient in theta order;
// parts receives the decomposition when non-null.
double family_loss(const ModelSpec& spec, const nn::ParameterSet& theta,
                   const Matrix& x, const std::vector<int>& y,
                   const std::vector<int>& s, double gamma,
                   const NoiseBundle& bundle, nn::GradientRecord* record,
                   LossParts* parts);

// Mini-batch gradient descent on the combined loss; pure in (spec, data,
// gamma). Throws NumericError naming the epoch and term on divergence.
TrainedModel fit(const ModelSpec& spec, const data::PreparedDataset& train, double gamma);

// Deterministic sigmoid task-head scores: vfae scores from the posterior
// mean, binary families from the thresholded code.
std::vector<double> predict_scores(const TrainedModel& model, const Matrix& x,
                                   const std::vector<int>& s);

// Second-to-last-layer activations. Sampled modes (vfae, binary_mi) draw with
// the recorded extraction seed; identical seeds reproduce identical draws.
Representation representations(const TrainedModel& model, const Matrix& x,
                               const std::vector<int>& s, std::uint64_t extraction_seed);

nlohmann::ordered_json checkpoint_json(const TrainedModel& model);
TrainedModel checkpoint_from_json(const nlohmann::json& j);

}  // namespace evalfrl::models
