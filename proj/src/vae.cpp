#include "rosetta/vae.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace rosetta {

namespace {

MlpSpec single_layer(const std::string& prefix, std::size_t in, std::size_t out) {
  return MlpSpec{prefix, {Layer{in, out, Activation::identity}}};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

MlpSpec Architecture::encoder_trunk() const {
  MlpSpec spec{"encoder.trunk", {}};
  std::size_t width = input_dim;
  for (std::size_t h : hidden) {
    spec.layers.push_back(Layer{width, h, activation});
    width = h;
  }
  return spec;
}

MlpSpec Architecture::mean_head() const {
  return single_layer("encoder.mean", trunk_width(), latent_dim);
}

MlpSpec Architecture::log_diag_head() const {
  return single_layer("encoder.log_diag", trunk_width(), latent_dim);
}

MlpSpec Architecture::lower_head() const {
  if (lower_dim() == 0) return MlpSpec{"encoder.lower", {}};
  return single_layer("encoder.lower", trunk_width(), lower_dim());
}

MlpSpec Architecture::decoder() const {
  MlpSpec spec{"decoder", {}};
  std::size_t width = latent_dim;
  for (auto it = hidden.rbegin(); it != hidden.rend(); ++it) {
    spec.layers.push_back(Layer{width, *it, activation});
    width = *it;
  }
  spec.layers.push_back(Layer{width, input_dim, Activation::identity});
  return spec;
}

std::string Architecture::describe() const {
  std::ostringstream out;
  out << input_dim << ":";
  for (std::size_t i = 0; i < hidden.size(); ++i) out << (i ? "-" : "") << hidden[i];
  out << ":" << latent_dim << ":" << activation_name(activation);
  return out.str();
}

std::string ModelState::digest() const {
  std::uint64_t h = fnv1a(architecture.describe());
  for (const auto& [name, m] : params) {
    h = fnv1a(name, h);
    for (double x : m.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>(bits >> (8 * i));
      h = fnv1a(std::string_view(bytes, 8), h);
    }
  }
  return hex64(h);
}

namespace {

void check_architecture(const Architecture& arch) {
  if (arch.input_dim == 0 || arch.latent_dim == 0) {
    throw ModelError("architecture needs nonzero input and latent dimensions");
  }
  for (std::size_t h : arch.hidden)
    if (h == 0) throw ModelError("hidden widths must be nonzero");
}

}  // namespace

ModelState init_model(const Architecture& arch, std::uint64_t seed) {
  check_architecture(arch);
  ModelState model{arch, {}, {seed, "", 0}};
  Rng rng(seed);
  init_mlp(model.params, arch.encoder_trunk(), rng);
  init_mlp(model.params, arch.mean_head(), rng);
  init_mlp(model.params, arch.log_diag_head(), rng);
  init_mlp(model.params, arch.lower_head(), rng);
  init_mlp(model.params, arch.decoder(), rng);
  return model;
}

ModelState zero_model(const Architecture& arch) {
  check_architecture(arch);
  ModelState model{arch, {}, {}};
  add_zero_mlp(model.params, arch.encoder_trunk());
  add_zero_mlp(model.params, arch.mean_head());
  add_zero_mlp(model.params, arch.log_diag_head());
  add_zero_mlp(model.params, arch.lower_head());
  add_zero_mlp(model.params, arch.decoder());
  return model;
}

namespace {

struct EncoderOutputs {
  Matrix mean;
  Matrix log_diag;
  Matrix lower;
};

Matrix run_trunk(const ModelState& model, const Matrix& inputs, MlpTrace* trace) {
  const MlpSpec trunk = model.architecture.encoder_trunk();
  if (inputs.cols() != model.architecture.input_dim) {
    throw ModelError("input width " + std::to_string(inputs.cols()) + " does not match model input " +
                     std::to_string(model.architecture.input_dim));
  }
  if (trunk.layers.empty()) return inputs;
  return forward_mlp(model.params, trunk, inputs, trace);
}

EncoderOutputs run_encoder(const ModelState& model, const Matrix& inputs) {
  const Architecture& arch = model.architecture;
  const Matrix h = run_trunk(model, inputs, nullptr);
  EncoderOutputs out;
  out.mean = forward_mlp(model.params, arch.mean_head(), h);
  out.log_diag = forward_mlp(model.params, arch.log_diag_head(), h);
  if (arch.lower_dim() > 0) {
    out.lower = forward_mlp(model.params, arch.lower_head(), h);
  } else {
    out.lower = Matrix(inputs.rows(), 0);
  }
  return out;
}

}  // namespace

GaussianPosterior encode(const ModelState& model, const Vector& x) {
  return encode_batch(model, Matrix::row_vector(x)).front();
}

Matrix encode_means(const ModelState& model, const Matrix& inputs) {
  const Matrix h = run_trunk(model, inputs, nullptr);
  return forward_mlp(model.params, model.architecture.mean_head(), h);
}

std::vector<GaussianPosterior> encode_batch(const ModelState& model, const Matrix& inputs) {
  const EncoderOutputs enc = run_encoder(model, inputs);
  std::vector<GaussianPosterior> out;
  out.reserve(inputs.rows());
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    Matrix chol = build_cholesky(enc.log_diag.row(r), enc.lower.row(r));
    require_finite(chol, "encoder.cholesky");
    out.push_back(GaussianPosterior{enc.mean.row_copy(r), std::move(chol)});
  }
  return out;
}

Vector decode(const ModelState& model, const Vector& z) {
  return decode_batch(model, Matrix::row_vector(z)).row_copy(0);
}

Matrix decode_batch(const ModelState& model, const Matrix& latents) {
  if (latents.cols() != model.architecture.latent_dim) {
    throw ModelError("latent width " + std::to_string(latents.cols()) + " does not match model latent " +
                     std::to_string(model.architecture.latent_dim));
  }
  return forward_mlp(model.params, model.architecture.decoder(), latents);
}

Vector sample_reparam(const GaussianPosterior& post, std::span<const double> noise) {
  if (noise.size() != post.dim()) throw ModelError("noise length does not match posterior dimension");
  Vector z = post.mean;
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t j = 0; j <= i; ++j) z[i] += post.chol(i, j) * noise[j];
  return z;
}

double kl_to_standard_normal(const GaussianPosterior& post) {
  const std::size_t d = post.dim();
  double trace = 0.0;
  double log_diag = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) trace += post.chol(i, j) * post.chol(i, j);
    log_diag += std::log(post.chol(i, i));
  }
  return 0.5 * (trace + dot(post.mean, post.mean) - static_cast<double>(d) - 2.0 * log_diag);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ModelError("batch size must be at least 1");
  if (epochs < 1) throw ModelError("epochs must be at least 1");
  if (!(beta >= 0.0)) throw ModelError("beta must be nonnegative");
  if (!(rho >= 0.0)) throw ModelError("rho must be nonnegative");
  if (!(learning_rate >= 0.0)) throw ModelError("learning rate must be nonnegative");
  if (!(eigen_floor > 0.0)) throw ModelError("eigen floor must be positive");
}

double effective_rho(const TrainConfig& config, std::size_t rosetta_count) {
  if (!config.rosetta_weighting) return config.rho;
  return config.rho * static_cast<double>(rosetta_count) / static_cast<double>(config.batch_size);
}

Matrix draw_noise(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix noise(rows, cols);
  for (double& x : noise.data()) x = rng.normal();
  return noise;
}

LossGraph build_loss(const ModelState& model, const Matrix& batch, double beta, double rho_eff,
                     const RosettaSet* rosetta, const Matrix& noise) {
  const Architecture& arch = model.architecture;
  const std::size_t d = arch.latent_dim;
  if (batch.rows() == 0) throw ModelError("loss needs a nonempty batch");
  if (noise.rows() != batch.rows() || noise.cols() != d) {
    throw ModelError("noise must be batch rows x latent dim");
  }

  LossGraph g;
  g.model_ = &model;
  g.beta_ = beta;
  g.batch_ = batch;
  g.noise_ = noise;

  g.trunk_out_ = run_trunk(model, batch, &g.trunk_trace_);
  g.mean_ = forward_mlp(model.params, arch.mean_head(), g.trunk_out_, &g.mean_trace_);
  g.log_diag_ = forward_mlp(model.params, arch.log_diag_head(), g.trunk_out_, &g.log_diag_trace_);
  if (arch.lower_dim() > 0) {
    g.lower_ = forward_mlp(model.params, arch.lower_head(), g.trunk_out_, &g.lower_trace_);
  } else {
    g.lower_ = Matrix(batch.rows(), 0);
  }

  const std::size_t n = batch.rows();
  Matrix z(n, d);
  double kl_sum = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const Matrix chol = build_cholesky(g.log_diag_.row(r), g.lower_.row(r));
    require_finite(chol, "encoder.cholesky");
    auto mu = g.mean_.row(r);
    auto eps = noise.row(r);
    auto zr = z.row(r);
    double tr = 0.0;
    double logdiag = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      zr[i] = mu[i];
      for (std::size_t j = 0; j <= i; ++j) {
        zr[i] += chol(i, j) * eps[j];
        tr += chol(i, j) * chol(i, j);
      }
      logdiag += g.log_diag_(r, i);
    }
    kl_sum += 0.5 * (tr + dot(mu, mu) - static_cast<double>(d) - 2.0 * logdiag);
  }
  g.recon_ = forward_mlp(model.params, arch.decoder(), z, &g.decoder_trace_);
  double recon_sum = 0.0;
  for (std::size_t r = 0; r < n; ++r) recon_sum += squared_distance(batch.row(r), g.recon_.row(r));

  const double inv_n = 1.0 / static_cast<double>(n);
  g.terms_.reconstruction = recon_sum * inv_n;
  g.terms_.kl = kl_sum * inv_n;
  g.terms_.total = g.terms_.reconstruction + beta * g.terms_.kl;

  if (rosetta != nullptr && rosetta->size() > 0) {
    if (rosetta->inputs.cols() != arch.input_dim || rosetta->latents.cols() != d ||
        rosetta->latents.rows() != rosetta->inputs.rows()) {
      throw ModelError("rosetta set dimensions do not match the model");
    }
    // Always evaluated so terms().penalty is informative; only weighted in
    // (and differentiated) when rho_eff > 0.
    g.anchor_trunk_out_ = run_trunk(model, rosetta->inputs, &g.anchor_trunk_trace_);
    g.anchor_mean_ =
        forward_mlp(model.params, arch.mean_head(), g.anchor_trunk_out_, &g.anchor_mean_trace_);
    g.anchor_recon_ =
        forward_mlp(model.params, arch.decoder(), rosetta->latents, &g.anchor_decoder_trace_);
    double penalty = 0.0;
    for (std::size_t r = 0; r < rosetta->size(); ++r) {
      penalty += squared_distance(rosetta->inputs.row(r), g.anchor_recon_.row(r));
      penalty += squared_distance(rosetta->latents.row(r), g.anchor_mean_.row(r));
    }
    g.terms_.penalty = penalty;
    if (rho_eff != 0.0) {
      g.rosetta_ = rosetta;
      g.rho_eff_ = rho_eff;
      g.terms_.total += rho_eff * penalty;
    }
  }
  if (!std::isfinite(g.terms_.total)) throw NonFiniteError("loss");
  return g;
}

LossGraph elbo_loss(const ModelState& model, const Matrix& batch, double beta, const Matrix& noise) {
  return build_loss(model, batch, beta, 0.0, nullptr, noise);
}

LossGraph rosetta_loss(const ModelState& model, const Matrix& batch, const RosettaSet* rosetta,
                       const TrainConfig& config, const Matrix& noise) {
  if (config.rho > 0.0 && (rosetta == nullptr || rosetta->size() == 0)) {
    throw ModelError("rosetta loss with rho > 0 needs a nonempty rosetta set");
  }
  const std::size_t count = rosetta ? rosetta->size() : 0;
  const double rho_eff = count > 0 ? effective_rho(config, count) : 0.0;
  return build_loss(model, batch, config.beta, rho_eff, rho_eff != 0.0 ? rosetta : nullptr, noise);
}

GradSet LossGraph::backward() const {
  const ModelState& model = *model_;
  const Architecture& arch = model.architecture;
  const std::size_t d = arch.latent_dim;
  const std::size_t n = batch_.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  GradSet grads = model.params.zeros_like();

  // Reconstruction: d/dm of mean ||x - m||^2.
  Matrix grad_recon(n, arch.input_dim);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < arch.input_dim; ++c)
      grad_recon(r, c) = 2.0 * (recon_(r, c) - batch_(r, c)) * inv_n;
  const Matrix grad_z = backward_mlp(model.params, arch.decoder(), decoder_trace_, grad_recon, grads);

  // Through z = mean + L * eps and the KL term.
  Matrix grad_mean(n, d);
  Matrix grad_log_diag(n, d);
  Matrix grad_lower(n, arch.lower_dim());
  const double kl_scale = beta_ * inv_n;
  for (std::size_t r = 0; r < n; ++r) {
    auto gz = grad_z.row(r);
    auto eps = noise_.row(r);
    std::size_t k = 0;
    for (std::size_t i = 0; i < d; ++i) {
      grad_mean(r, i) = gz[i] + kl_scale * mean_(r, i);
      for (std::size_t j = 0; j < i; ++j, ++k) {
        grad_lower(r, k) = gz[i] * eps[j] + kl_scale * lower_(r, k);
      }
      const double diag = std::exp(log_diag_(r, i));
      grad_log_diag(r, i) = gz[i] * eps[i] * diag + kl_scale * (diag * diag - 1.0);
    }
  }
  require_finite(grad_mean, "encoder.mean.output");
  require_finite(grad_log_diag, "encoder.log_diag.output");
  require_finite(grad_lower, "encoder.lower.output");

  Matrix grad_trunk =
      backward_mlp(model.params, arch.mean_head(), mean_trace_, grad_mean, grads);
  grad_trunk += backward_mlp(model.params, arch.log_diag_head(), log_diag_trace_, grad_log_diag, grads);
  if (arch.lower_dim() > 0) {
    grad_trunk += backward_mlp(model.params, arch.lower_head(), lower_trace_, grad_lower, grads);
  }
  const MlpSpec trunk = arch.encoder_trunk();
  if (!trunk.layers.empty()) backward_mlp(model.params, trunk, trunk_trace_, grad_trunk, grads);

  if (rosetta_ != nullptr) {
    const std::size_t count = rosetta_->size();
    Matrix grad_anchor_recon(count, arch.input_dim);
    Matrix grad_anchor_mean(count, d);
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t c = 0; c < arch.input_dim; ++c) {
        grad_anchor_recon(r, c) = 2.0 * rho_eff_ * (anchor_recon_(r, c) - rosetta_->inputs(r, c));
      }
      for (std::size_t c = 0; c < d; ++c) {
        grad_anchor_mean(r, c) = 2.0 * rho_eff_ * (anchor_mean_(r, c) - rosetta_->latents(r, c));
      }
    }
    backward_mlp(model.params, arch.decoder(), anchor_decoder_trace_, grad_anchor_recon, grads);
    const Matrix grad_anchor_trunk =
        backward_mlp(model.params, arch.mean_head(), anchor_mean_trace_, grad_anchor_mean, grads);
    if (!trunk.layers.empty()) {
      backward_mlp(model.params, trunk, anchor_trunk_trace_, grad_anchor_trunk, grads);
    }
  }
  return grads;
}

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::size_t step, const std::string& detail)
    : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(step) + ": " + detail),
      epoch_(epoch),
      step_(step) {}

LossTerms evaluate_loss(const ModelState& model, const Dataset& data, const RosettaSet* rosetta,
                        const TrainConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix noise = draw_noise(rng, data.size(), model.architecture.latent_dim);
  const std::size_t count = rosetta ? rosetta->size() : 0;
  const double rho_eff = count > 0 ? effective_rho(config, count) : 0.0;
  return build_loss(model, data.inputs, config.beta, rho_eff, rosetta, noise).terms();
}

TrainResult train(ModelState init, const Dataset& data, const RosettaSet* rosetta,
                  const TrainConfig& config, const Dataset* validation,
                  const ProgressSink& progress) {
  config.validate();
  if (data.size() == 0) throw ModelError("training data is empty");
  if (config.rho > 0.0 && (rosetta == nullptr || rosetta->size() == 0)) {
    throw ModelError("rho > 0 needs a nonempty rosetta set");
  }

  TrainResult result{std::move(init), {}};
  ModelState& model = result.model;
  AdamState adam = AdamState::for_params(model.params, AdamOptions{config.learning_rate});
  Rng shuffle_rng(derive_seed(config.seed, 1));
  Rng noise_rng(derive_seed(config.seed, 2));
  const std::uint64_t val_seed = derive_seed(config.seed, 3);
  const std::size_t count = rosetta ? rosetta->size() : 0;
  const double rho_eff = count > 0 ? effective_rho(config, count) : 0.0;
  const RosettaSet* anchors = rho_eff != 0.0 ? rosetta : nullptr;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++step) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      const Matrix batch = select_rows(data.inputs, rows);
      const Matrix noise = draw_noise(noise_rng, batch.rows(), model.architecture.latent_dim);
      try {
        const LossGraph graph = build_loss(model, batch, config.beta, rho_eff, anchors, noise);
        const GradSet grads = graph.backward();
        adam_step(model.params, grads, adam);
        epoch_loss += graph.value() * static_cast<double>(batch.rows());
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(epoch, step, e.what());
      }
    }
    if (!model.params.all_finite()) throw TrainingDiverged(epoch, step, "non-finite parameters");

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = epoch_loss / static_cast<double>(data.size());
    if (validation != nullptr && validation->size() > 0) {
      try {
        record.val_terms = evaluate_loss(model, *validation, rosetta, config, val_seed);
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(epoch, step, e.what());
      }
      record.val_loss = record.val_terms.total;
    }
    if (progress) progress(record);
    result.trace.push_back(record);
  }
  model.provenance.seed = config.seed;
  model.provenance.epochs += config.epochs;
  return result;
}

}  // namespace rosetta
