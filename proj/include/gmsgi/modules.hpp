#pragma once

#include <memory>
#include <string>

#include "gmsgi/nn_ops.hpp"
#include "gmsgi/rng.hpp"

// Parameterized building blocks. Weights use fan-in-scaled uniform init
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.

namespace gmsgi {

template <typename S>
Tensor<S> uniform_init(const Shape& sh, int fan_in, Rng& rng) {
  Tensor<S> t(sh);
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  for (auto& v : t.data) v = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

template <typename S>
struct Conv2dLayer {
  Var<S> w, b;
  int stride = 1, padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParameterStore<S>& store, const std::string& prefix, int cin, int cout, int k,
              bool bias, int stride_, int padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    w = store.add(prefix + ".w", uniform_init<S>(Shape{cout, cin, k, k}, cin * k * k, rng));
    if (bias) b = store.add(prefix + ".b", Tensor<S>(Shape{cout}));
  }

  Var<S> forward(const Var<S>& x) const { return ops::conv2d(x, w, b, stride, padding); }
};

template <typename S>
struct BatchNorm2dLayer {
  Var<S> gamma, beta;
  std::shared_ptr<Tensor<S>> run_mean, run_var;
  S eps = S(1e-5);
  S momentum = S(0.1);

  BatchNorm2dLayer() = default;
  BatchNorm2dLayer(ParameterStore<S>& store, const std::string& prefix, int c) {
    gamma = store.add(prefix + ".gamma", Tensor<S>(Shape{c}, S(1)));
    beta = store.add(prefix + ".beta", Tensor<S>(Shape{c}));
    run_mean = std::make_shared<Tensor<S>>(Shape{c});
    run_var = std::make_shared<Tensor<S>>(Shape{c}, S(1));
    store.add_buffer(prefix + ".running_mean", run_mean);
    store.add_buffer(prefix + ".running_var", run_var);
  }

  Var<S> forward(const Var<S>& x, bool training) const {
    return ops::batchnorm2d(x, gamma, beta, run_mean, run_var, eps, momentum, training);
  }
};

template <typename S>
struct LinearLayer {
  Var<S> w, b;

  LinearLayer() = default;
  LinearLayer(ParameterStore<S>& store, const std::string& prefix, int in, int out, Rng& rng) {
    w = store.add(prefix + ".w", uniform_init<S>(Shape{out, in}, in, rng));
    b = store.add(prefix + ".b", Tensor<S>(Shape{out}));
  }

  Var<S> forward(const Var<S>& x) const { return ops::linear(x, w, b); }
};

}  // namespace gmsgi
