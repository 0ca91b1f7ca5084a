#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rosetta/linalg.hpp"
#include "rosetta/rng.hpp"

namespace rosetta {

/// Named tensors with a fixed insertion order. Biases are stored as 1 x n rows.
class TensorMap {
 public:
  void add(const std::string& name, Matrix value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Same keys, same order, same shapes.
  bool same_layout(const TensorMap& other) const;
  TensorMap zeros_like() const;
  bool all_finite() const;

  friend bool operator==(const TensorMap& a, const TensorMap& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<std::pair<std::string, Matrix>> entries_;
  std::map<std::string, std::size_t> index_;
};

using ParamSet = TensorMap;
using GradSet = TensorMap;

/// Raised when a forward or backward pass produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& node)
      : std::runtime_error("non-finite value at node '" + node + "'"), node_(node) {}
  const std::string& node() const { return node_; }

 private:
  std::string node_;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation { identity, relu, tanh };

const char* activation_name(Activation a);
Activation parse_activation(const std::string& name);

struct Layer {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::relu;
};

/// A stack of affine layers whose parameters live under `prefix` in a ParamSet
/// as "<prefix>.<i>.weight" (out x in) and "<prefix>.<i>.bias" (1 x out).
struct MlpSpec {
  std::string prefix;
  std::vector<Layer> layers;

  std::size_t input_width() const { return layers.front().in; }
  std::size_t output_width() const { return layers.back().out; }
  std::string weight_name(std::size_t i) const;
  std::string bias_name(std::size_t i) const;
};

/// Activations retained for the backward pass. inputs[i] feeds layer i and
/// outputs[i] is its post-activation value.
struct MlpTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> outputs;
};

/// Glorot-uniform weights, zero biases.
void init_mlp(ParamSet& params, const MlpSpec& spec, Rng& rng);
void add_zero_mlp(ParamSet& params, const MlpSpec& spec);

/// Evaluates the network on each row of `input`.
Matrix forward_mlp(const ParamSet& params, const MlpSpec& spec, const Matrix& input,
                   MlpTrace* trace = nullptr);
Vector forward_mlp(const ParamSet& params, const MlpSpec& spec, const Vector& input);

/// Accumulates parameter gradients into `grads` given dLoss/dOutput and
/// returns dLoss/dInput.
Matrix backward_mlp(const ParamSet& params, const MlpSpec& spec, const MlpTrace& trace,
                    const Matrix& grad_output, GradSet& grads);

/// Throws NonFiniteError naming `node` when `m` contains NaN or Inf.
void require_finite(const Matrix& m, const std::string& node);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamOptions options;
  TensorMap first_moment;
  TensorMap second_moment;
  std::size_t step = 0;

  static AdamState for_params(const ParamSet& params, AdamOptions options = {});
};

/// One bias-corrected Adam update in place.
void adam_step(ParamSet& params, const GradSet& grads, AdamState& state);

}  // namespace rosetta
