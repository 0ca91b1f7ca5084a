#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rosetta/autodiff.hpp"
#include "rosetta/datasets.hpp"
#include "rosetta/linalg.hpp"
#include "rosetta/rng.hpp"

namespace rosetta {

/// Fully connected encoder/decoder pair. The encoder trunk maps the input
/// through `hidden`; three linear heads read the trunk output and produce the
/// posterior mean, the raw log-diagonal of the Cholesky factor and its strict
/// lower triangle. The decoder mirrors the trunk and ends in a linear layer.
struct Architecture {
  std::size_t input_dim = kEightGaussiansDim;
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t latent_dim = 2;
  Activation activation = Activation::relu;

  std::size_t trunk_width() const { return hidden.empty() ? input_dim : hidden.back(); }
  std::size_t lower_dim() const { return lower_triangle_size(latent_dim); }

  MlpSpec encoder_trunk() const;
  MlpSpec mean_head() const;
  MlpSpec log_diag_head() const;
  MlpSpec lower_head() const;
  MlpSpec decoder() const;

  std::string describe() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string config_digest;
  std::size_t epochs = 0;
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ModelState {
  Architecture architecture;
  ParamSet params;
  Provenance provenance;

  /// Digest of architecture and parameter bytes.
  std::string digest() const;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Glorot-uniform weights and zero biases from a stream seeded by `seed`.
ModelState init_model(const Architecture& arch, std::uint64_t seed);
/// Every parameter zero.
ModelState zero_model(const Architecture& arch);

struct GaussianPosterior {
  Vector mean;
  Matrix chol;  // lower triangular, positive diagonal

  std::size_t dim() const { return mean.size(); }
  Matrix covariance() const { return matmul_nt(chol, chol); }
};

GaussianPosterior encode(const ModelState& model, const Vector& x);
/// Posterior means for every row of `inputs`.
Matrix encode_means(const ModelState& model, const Matrix& inputs);
/// Posteriors for every row of `inputs`.
std::vector<GaussianPosterior> encode_batch(const ModelState& model, const Matrix& inputs);

Vector decode(const ModelState& model, const Vector& z);
Matrix decode_batch(const ModelState& model, const Matrix& latents);

/// mean + chol * noise.
Vector sample_reparam(const GaussianPosterior& post, std::span<const double> noise);

/// KL(N(mean, chol chol^T) || N(0, I)).
double kl_to_standard_normal(const GaussianPosterior& post);

/// Distilled anchor pairs: row r of `inputs` is x_r, row r of `latents` is z_r.
struct RosettaSet {
  Matrix inputs;
  Matrix latents;
  std::string selector = "kmeans";
  std::string source_digest;
  std::uint64_t seed = 0;
  /// Dataset row each pair was taken from.
  std::vector<std::size_t> source_rows;

  std::size_t size() const { return inputs.rows(); }
};

struct TrainConfig {
  double beta = 1.0;
  double rho = 0.0;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  double eigen_floor = 1e-12;
  /// Scale rho by (rosetta count / batch size).
  bool rosetta_weighting = true;

  void validate() const;
};

/// rho as applied to the summed anchor penalty.
double effective_rho(const TrainConfig& config, std::size_t rosetta_count);

struct LossTerms {
  double total = 0.0;
  /// Batch means.
  double reconstruction = 0.0;
  double kl = 0.0;
  /// Unweighted sum over anchor pairs.
  double penalty = 0.0;
};

/// Evaluated objective with the intermediate values needed for gradients.
///
/// The graph refers to the model and anchor set it was built from; both must
/// outlive it. Node kinds are fixed: affine layers with pointwise
/// activations, the Cholesky exponential, reparameterized sampling, squared
/// errors and the Gaussian KL.
class LossGraph {
 public:
  double value() const { return terms_.total; }
  const LossTerms& terms() const { return terms_; }

  /// Gradient of value() with respect to every model parameter.
  GradSet backward() const;

 private:
  friend LossGraph build_loss(const ModelState&, const Matrix&, double, double,
                              const RosettaSet*, const Matrix&);

  const ModelState* model_ = nullptr;
  const RosettaSet* rosetta_ = nullptr;
  double beta_ = 1.0;
  double rho_eff_ = 0.0;
  Matrix batch_;
  Matrix noise_;
  MlpTrace trunk_trace_;
  Matrix trunk_out_;
  MlpTrace mean_trace_;
  MlpTrace log_diag_trace_;
  MlpTrace lower_trace_;
  Matrix mean_;
  Matrix log_diag_;
  Matrix lower_;
  MlpTrace decoder_trace_;
  Matrix recon_;
  // Anchor branch.
  MlpTrace anchor_trunk_trace_;
  Matrix anchor_trunk_out_;
  MlpTrace anchor_mean_trace_;
  Matrix anchor_mean_;
  MlpTrace anchor_decoder_trace_;
  Matrix anchor_recon_;
  LossTerms terms_;
};

/// Mean over rows of ||x - m(z)||^2 + beta * KL, with z = mean + chol * noise
/// row by row. `noise` is batch rows x latent dim.
LossGraph elbo_loss(const ModelState& model, const Matrix& batch, double beta, const Matrix& noise);

/// elbo_loss plus effective_rho * sum_r (||x_r - m(z_r)||^2 + ||z_r - mu(x_r)||^2).
LossGraph rosetta_loss(const ModelState& model, const Matrix& batch, const RosettaSet* rosetta,
                       const TrainConfig& config, const Matrix& noise);

/// Shared implementation behind elbo_loss and rosetta_loss.
LossGraph build_loss(const ModelState& model, const Matrix& batch, double beta, double rho_eff,
                     const RosettaSet* rosetta, const Matrix& noise);

/// rows x cols standard normal draws.
Matrix draw_noise(Rng& rng, std::size_t rows, std::size_t cols);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  /// Validation objective under the run's own beta and rho.
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  LossTerms val_terms;
};

struct TrainResult {
  ModelState model;
  std::vector<EpochRecord> trace;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t step, const std::string& detail);
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t epoch_;
  std::size_t step_;
};

using ProgressSink = std::function<void(const EpochRecord&)>;

/// Evaluates the run's objective on all of `data` as one batch with a fixed
/// noise stream derived from `seed`. rho is weighted with the configured
/// batch size so values compare with training losses.
LossTerms evaluate_loss(const ModelState& model, const Dataset& data, const RosettaSet* rosetta,
                        const TrainConfig& config, std::uint64_t seed);

/// epochs x ceil(n / B) Adam steps over reshuffled batches. When `rosetta` is
/// given every step includes the full anchor penalty.
TrainResult train(ModelState init, const Dataset& data, const RosettaSet* rosetta,
                  const TrainConfig& config, const Dataset* validation = nullptr,
                  const ProgressSink& progress = {});

}  // namespace rosetta
