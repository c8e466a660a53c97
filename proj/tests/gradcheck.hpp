#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rsoup/autodiff.hpp"
#include "rsoup/network.hpp"

namespace rsoup::testing {

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline double evaluate(const Builder& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
  return tape.value(f(tape, vars)).item();
}

// Worst norm-wise relative error ||analytic - numeric|| / max(||analytic||,
// ||numeric||) over the inputs, with central differences of step h.
inline double gradcheck(const Builder& f, const std::vector<Tensor<double>>& inputs,
                        double h = 1e-6) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
  const Var out = f(tape, vars);
  tape.backward(out);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& g = tape.grad(vars[k]);
    std::vector<Tensor<double>> probe = inputs;
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t j = 0; j < inputs[k].size(); ++j) {
      const double x = inputs[k][j];
      probe[k][j] = x + h;
      const double up = evaluate(f, probe);
      probe[k][j] = x - h;
      const double down = evaluate(f, probe);
      probe[k][j] = x;
      const double num = (up - down) / (2 * h);
      diff += (g[j] - num) * (g[j] - num);
      na += g[j] * g[j];
      nn += num * num;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

inline double network_loss(const Network<double>& net, const Tensor<double>& x,
                           const std::vector<int>& labels) {
  Tape<double> t;
  return t.value(t.mean(t.cross_entropy(net.forward(t, t.leaf(x), false), labels))).item();
}

// Same norm-wise error for the parameters and the input of a network under
// mean cross-entropy.
inline double network_gradcheck(Network<double> net, Tensor<double> x,
                                const std::vector<int>& labels, double h = 1e-6) {
  Tape<double> tape;
  std::vector<Var> pv;
  const Var xin = tape.leaf(x, true);
  const Var loss = tape.mean(tape.cross_entropy(net.forward(tape, xin, true, &pv), labels));
  tape.backward(loss);
  double worst = 0.0;
  auto check = [&](Tensor<double>& target, const Tensor<double>& analytic) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t j = 0; j < target.size(); ++j) {
      const double v = target[j];
      target[j] = v + h;
      const double up = network_loss(net, x, labels);
      target[j] = v - h;
      const double down = network_loss(net, x, labels);
      target[j] = v;
      const double num = (up - down) / (2 * h);
      diff += (analytic[j] - num) * (analytic[j] - num);
      na += analytic[j] * analytic[j];
      nn += num * num;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12}));
  };
  for (std::size_t i = 0; i < pv.size(); ++i) check(net.params()[i].tensor, tape.grad(pv[i]));
  check(x, tape.grad(xin));
  return worst;
}

}  // namespace rsoup::testing
