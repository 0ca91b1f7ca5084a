#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rosetta/autodiff.hpp"

using namespace rosetta;

namespace {

MlpSpec single(std::size_t in, std::size_t out, Activation act) {
  return MlpSpec{"net", {Layer{in, out, act}}};
}

double apply(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0 ? x : 0.0;
    case Activation::tanh: return std::tanh(x);
  }
  return x;
}

// Straight-line evaluation, one scalar at a time.
std::vector<double> reference_forward(const ParamSet& p, const MlpSpec& spec, std::vector<double> x) {
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Matrix& w = p.at(spec.weight_name(i));
    const Matrix& b = p.at(spec.bias_name(i));
    std::vector<double> y(spec.layers[i].out);
    for (std::size_t o = 0; o < y.size(); ++o) {
      double s = b(0, o);
      for (std::size_t k = 0; k < x.size(); ++k) s += w(o, k) * x[k];
      y[o] = apply(spec.layers[i].activation, s);
    }
    x = std::move(y);
  }
  return x;
}

}  // namespace

TEST_CASE("identity layer passes its input through") {
  const MlpSpec spec = single(3, 3, Activation::identity);
  ParamSet p;
  p.add(spec.weight_name(0), Matrix::identity(3));
  p.add(spec.bias_name(0), Matrix(1, 3));
  const Vector v{0.5, -2.0, 3.0};
  CHECK(forward_mlp(p, spec, v) == v);
}

TEST_CASE("relu layer by hand") {
  const MlpSpec spec = single(2, 1, Activation::relu);
  ParamSet p;
  p.add(spec.weight_name(0), Matrix{{1, 1}});
  p.add(spec.bias_name(0), Matrix(1, 1));
  CHECK(forward_mlp(p, spec, Vector{-1.0, 2.0}) == Vector{1.0});
}

TEST_CASE("tanh network matches a straight-line oracle") {
  const MlpSpec spec{"net", {Layer{5, 8, Activation::tanh}, Layer{8, 3, Activation::tanh}}};
  ParamSet p;
  Rng rng(13);
  init_mlp(p, spec, rng);
  Rng input_rng(14);
  Vector x(5);
  for (double& v : x) v = input_rng.normal();
  const Vector got = forward_mlp(p, spec, x);
  const Vector want = reference_forward(p, spec, x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
}

TEST_CASE("glorot initialization bounds and zero biases") {
  const MlpSpec spec{"net", {Layer{5, 8, Activation::relu}, Layer{8, 3, Activation::identity}}};
  ParamSet p;
  Rng rng(1);
  init_mlp(p, spec, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    const double limit = std::sqrt(6.0 / static_cast<double>(spec.layers[i].in + spec.layers[i].out));
    for (double w : p.at(spec.weight_name(i)).data()) CHECK(std::abs(w) <= limit);
    CHECK(max_abs(p.at(spec.bias_name(i))) == 0.0);
  }
  CHECK(p.parameter_count() == 5 * 8 + 8 + 8 * 3 + 3);
}

TEST_CASE("gradient of a squared norm by hand") {
  // loss = ||W x||^2 with W = I, x = (1, 2): dW = 2 (W x) x^T.
  const MlpSpec spec = single(2, 2, Activation::identity);
  ParamSet p;
  p.add(spec.weight_name(0), Matrix::identity(2));
  p.add(spec.bias_name(0), Matrix(1, 2));
  MlpTrace trace;
  const Matrix x{{1, 2}};
  const Matrix y = forward_mlp(p, spec, x, &trace);
  GradSet grads = p.zeros_like();
  backward_mlp(p, spec, trace, y * 2.0, grads);
  CHECK(grads.at(spec.weight_name(0)) == Matrix{{2, 4}, {4, 8}});
  CHECK(grads.at(spec.bias_name(0)) == Matrix{{2, 4}});
}

TEST_CASE("parameters the loss ignores get zero gradient") {
  const MlpSpec spec = single(3, 2, Activation::tanh);
  ParamSet p;
  Rng rng(2);
  init_mlp(p, spec, rng);
  MlpTrace trace;
  forward_mlp(p, spec, Matrix{{0.1, 0.2, 0.3}}, &trace);
  GradSet grads = p.zeros_like();
  // Loss reads only output unit 0.
  backward_mlp(p, spec, trace, Matrix{{1.0, 0.0}}, grads);
  const Matrix& gw = grads.at(spec.weight_name(0));
  for (std::size_t c = 0; c < 3; ++c) CHECK(gw(1, c) == 0.0);
  CHECK(grads.at(spec.bias_name(0))(0, 1) == 0.0);
}

TEST_CASE("backward matches central differences on a tanh stack") {
  const MlpSpec spec{"net", {Layer{4, 6, Activation::tanh}, Layer{6, 3, Activation::identity}}};
  ParamSet p;
  Rng rng(5);
  init_mlp(p, spec, rng);
  const Matrix x = oracle::random_matrix(7, 4, 6);
  auto loss = [&](const ParamSet& q) {
    const Matrix y = forward_mlp(q, spec, x);
    double s = 0.0;
    for (double v : y.data()) s += v * v * v;  // non-quadratic
    return s;
  };
  MlpTrace trace;
  const Matrix y = forward_mlp(p, spec, x, &trace);
  Matrix gy = y;
  for (double& v : gy.data()) v = 3.0 * v * v;
  GradSet grads = p.zeros_like();
  const Matrix gx = backward_mlp(p, spec, trace, gy, grads);
  CHECK(gx.rows() == 7);
  CHECK(gx.cols() == 4);
  for (auto& [name, m] : p) {
    for (std::size_t k = 0; k < m.size(); ++k) {
      ParamSet plus = p, minus = p;
      plus.at(name).data()[k] += 1e-5;
      minus.at(name).data()[k] -= 1e-5;
      const double fd = (loss(plus) - loss(minus)) / 2e-5;
      const double g = grads.at(name).data()[k];
      CHECK(std::abs(fd - g) <= std::max(1e-6, 1e-4 * std::abs(g)));
    }
  }
}

TEST_CASE("shape and finiteness errors") {
  const MlpSpec spec = single(2, 2, Activation::relu);
  ParamSet p;
  Rng rng(3);
  init_mlp(p, spec, rng);
  CHECK_THROWS_AS(forward_mlp(p, spec, Vector{1.0, 2.0, 3.0}), ShapeError);
  p.at(spec.weight_name(0))(0, 0) = INFINITY;
  try {
    forward_mlp(p, spec, Vector{1.0, 2.0});
    FAIL("expected a non-finite error");
  } catch (const NonFiniteError& e) {
    CHECK(e.node() == "net.0");
  }
  CHECK_THROWS_AS(p.add(spec.bias_name(0), Matrix(1, 2)), ShapeError);
}

TEST_CASE("adam with zero gradient leaves parameters and counts the step") {
  ParamSet p;
  p.add("w", Matrix{{1.0, -2.0}});
  const ParamSet before = p;
  AdamState state = AdamState::for_params(p);
  adam_step(p, p.zeros_like(), state);
  CHECK(p == before);
  CHECK(state.step == 1);
}

TEST_CASE("first adam step is lr times the gradient sign") {
  ParamSet p;
  p.add("w", Matrix{{0.0, 0.0, 0.0}});
  GradSet g;
  g.add("w", Matrix{{0.3, -4.0, 1e-3}});
  AdamState state = AdamState::for_params(p, AdamOptions{0.01});
  adam_step(p, g, state);
  const Matrix& w = p.at("w");
  for (std::size_t i = 0; i < 3; ++i) {
    const double gi = g.at("w")(0, i);
    CHECK(w(0, i) == doctest::Approx(-0.01 * gi / (std::abs(gi) + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("adam matches a scalar oracle over two steps") {
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamSet p;
  p.add("w", Matrix{{0.5, -1.5, 2.0}});
  GradSet g;
  g.add("w", Matrix{{0.2, -0.7, 3.0}});
  AdamState state = AdamState::for_params(p);
  const Matrix start = p.at("w");
  adam_step(p, g, state);
  adam_step(p, g, state);
  for (std::size_t i = 0; i < 3; ++i) {
    double theta = start(0, i), m = 0.0, v = 0.0;
    const double gi = g.at("w")(0, i);
    for (int t = 1; t <= 2; ++t) {
      m = b1 * m + (1 - b1) * gi;
      v = b2 * v + (1 - b2) * gi * gi;
      const double mh = m / (1 - std::pow(b1, t));
      const double vh = v / (1 - std::pow(b2, t));
      theta -= lr * mh / (std::sqrt(vh) + eps);
    }
    CHECK(std::abs(p.at("w")(0, i) - theta) < 1e-12);
  }
}

TEST_CASE("adam with zero learning rate is the identity") {
  ParamSet p;
  Rng rng(9);
  init_mlp(p, single(3, 4, Activation::relu), rng);
  const ParamSet before = p;
  GradSet g = p.zeros_like();
  for (auto& [name, m] : g)
    for (double& v : m.data()) v = rng.normal();
  AdamState state = AdamState::for_params(p, AdamOptions{0.0});
  for (int i = 0; i < 5; ++i) adam_step(p, g, state);
  CHECK(p == before);
}

TEST_CASE("adam rejects mismatched layouts") {
  ParamSet p;
  p.add("w", Matrix(1, 2));
  GradSet g;
  g.add("w", Matrix(2, 1));
  AdamState state = AdamState::for_params(p);
  CHECK_THROWS_AS(adam_step(p, g, state), ShapeError);
}

TEST_CASE("repeated optimization from one seed is bitwise identical") {
  auto run = [] {
    const MlpSpec spec{"net", {Layer{3, 5, Activation::relu}, Layer{5, 2, Activation::identity}}};
    ParamSet p;
    Rng rng(42);
    init_mlp(p, spec, rng);
    AdamState state = AdamState::for_params(p);
    for (int step = 0; step < 25; ++step) {
      Matrix x(4, 3);
      for (double& v : x.data()) v = rng.normal();
      MlpTrace trace;
      const Matrix y = forward_mlp(p, spec, x, &trace);
      GradSet grads = p.zeros_like();
      backward_mlp(p, spec, trace, y * 2.0, grads);
      adam_step(p, grads, state);
    }
    return p;
  };
  CHECK(run() == run());
}
