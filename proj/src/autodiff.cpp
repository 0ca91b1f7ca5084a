#include "rosetta/autodiff.hpp"

#include <cmath>

namespace rosetta {

void TensorMap::add(const std::string& name, Matrix value) {
  if (contains(name)) throw ShapeError("duplicate tensor name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(value));
}

Matrix& TensorMap::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown tensor '" + name + "'");
  return entries_[it->second].second;
}

const Matrix& TensorMap::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown tensor '" + name + "'");
  return entries_[it->second].second;
}

std::size_t TensorMap::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : entries_) n += m.size();
  return n;
}

bool TensorMap::same_layout(const TensorMap& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (!entries_[i].second.same_shape(other.entries_[i].second)) return false;
  }
  return true;
}

TensorMap TensorMap::zeros_like() const {
  TensorMap out;
  for (const auto& [name, m] : entries_) out.add(name, Matrix(m.rows(), m.cols()));
  return out;
}

bool TensorMap::all_finite() const {
  for (const auto& [name, m] : entries_)
    if (!m.all_finite()) return false;
  return true;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ShapeError("unknown activation '" + name + "'");
}

std::string MlpSpec::weight_name(std::size_t i) const {
  return prefix + "." + std::to_string(i) + ".weight";
}

std::string MlpSpec::bias_name(std::size_t i) const {
  return prefix + "." + std::to_string(i) + ".bias";
}

void init_mlp(ParamSet& params, const MlpSpec& spec, Rng& rng) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    Matrix w(layer.out, layer.in);
    for (double& x : w.data()) x = rng.uniform(-limit, limit);
    params.add(spec.weight_name(i), std::move(w));
    params.add(spec.bias_name(i), Matrix(1, layer.out));
  }
}

void add_zero_mlp(ParamSet& params, const MlpSpec& spec) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    params.add(spec.weight_name(i), Matrix(spec.layers[i].out, spec.layers[i].in));
    params.add(spec.bias_name(i), Matrix(1, spec.layers[i].out));
  }
}

void require_finite(const Matrix& m, const std::string& node) {
  if (!m.all_finite()) throw NonFiniteError(node);
}

namespace {

void apply_activation(Matrix& m, Activation a) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu:
      for (double& x : m.data()) x = x > 0.0 ? x : 0.0;
      break;
    case Activation::tanh:
      for (double& x : m.data()) x = std::tanh(x);
      break;
  }
}

}  // namespace

Matrix forward_mlp(const ParamSet& params, const MlpSpec& spec, const Matrix& input,
                   MlpTrace* trace) {
  if (spec.layers.empty()) throw ShapeError("mlp '" + spec.prefix + "' has no layers");
  if (input.cols() != spec.input_width()) {
    throw ShapeError("mlp '" + spec.prefix + "' expects width " +
                     std::to_string(spec.input_width()) + ", got " + std::to_string(input.cols()));
  }
  if (trace) {
    trace->inputs.clear();
    trace->outputs.clear();
  }
  Matrix h = input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Matrix& w = params.at(spec.weight_name(i));
    const Matrix& b = params.at(spec.bias_name(i));
    if (w.rows() != spec.layers[i].out || w.cols() != spec.layers[i].in) {
      throw ShapeError("weight '" + spec.weight_name(i) + "' has the wrong shape");
    }
    Matrix out = matmul_nt(h, w);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      for (std::size_t c = 0; c < out.cols(); ++c) row[c] += b(0, c);
    }
    apply_activation(out, spec.layers[i].activation);
    require_finite(out, spec.prefix + "." + std::to_string(i));
    if (trace) trace->inputs.push_back(std::move(h));
    h = std::move(out);
    if (trace) trace->outputs.push_back(h);
  }
  return h;
}

Vector forward_mlp(const ParamSet& params, const MlpSpec& spec, const Vector& input) {
  return forward_mlp(params, spec, Matrix::row_vector(input)).row_copy(0);
}

Matrix backward_mlp(const ParamSet& params, const MlpSpec& spec, const MlpTrace& trace,
                    const Matrix& grad_output, GradSet& grads) {
  if (trace.inputs.size() != spec.layers.size()) {
    throw ShapeError("trace for '" + spec.prefix + "' does not match its spec");
  }
  Matrix delta = grad_output;
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const Matrix& out = trace.outputs[i];
    switch (spec.layers[i].activation) {
      case Activation::identity: break;
      case Activation::relu:
        for (std::size_t k = 0; k < delta.size(); ++k)
          if (!(out.data()[k] > 0.0)) delta.data()[k] = 0.0;
        break;
      case Activation::tanh:
        for (std::size_t k = 0; k < delta.size(); ++k) {
          const double t = out.data()[k];
          delta.data()[k] *= 1.0 - t * t;
        }
        break;
    }
    Matrix& gw = grads.at(spec.weight_name(i));
    Matrix& gb = grads.at(spec.bias_name(i));
    gw += matmul_tn(delta, trace.inputs[i]);
    for (std::size_t r = 0; r < delta.rows(); ++r)
      for (std::size_t c = 0; c < delta.cols(); ++c) gb(0, c) += delta(r, c);
    require_finite(gw, spec.weight_name(i));
    require_finite(gb, spec.bias_name(i));
    delta = matmul(delta, params.at(spec.weight_name(i)));
  }
  return delta;
}

AdamState AdamState::for_params(const ParamSet& params, AdamOptions options) {
  return AdamState{options, params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ParamSet& params, const GradSet& grads, AdamState& state) {
  if (!params.same_layout(grads) || !params.same_layout(state.first_moment)) {
    throw ShapeError("adam_step: parameter, gradient and state layouts differ");
  }
  const AdamOptions& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  auto p_it = params.begin();
  auto g_it = grads.begin();
  auto m_it = state.first_moment.begin();
  auto v_it = state.second_moment.begin();
  for (; p_it != params.end(); ++p_it, ++g_it, ++m_it, ++v_it) {
    auto p = p_it->second.data();
    auto g = g_it->second.data();
    auto m = m_it->second.data();
    auto v = v_it->second.data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      p[k] -= o.learning_rate * m_hat / (std::sqrt(v_hat) + o.epsilon);
    }
  }
}

}  // namespace rosetta
