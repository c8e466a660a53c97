#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsoup/autodiff.hpp"
#include "rsoup/tensor.hpp"

namespace rsoup {

// Architecture identifier, e.g. "cnn-16/1x16x16/10" or "mlp-64/1x16x16/10".
//   linear: flatten -> fc(K)
//   mlp-H:  flatten -> fc(H) -> relu -> fc(K)
//   cnn-W:  conv3x3/2(W/2) -> relu -> conv3x3/2(W) -> relu -> flatten -> fc(K)
//   cnnpool-W: conv3x3(W/2) -> relu -> avgpool2 -> conv3x3/2(W) -> relu -> flatten -> fc(K)
struct ArchSpec {
  std::string kind = "cnn";
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t cols = 16;
  std::size_t classes = 10;

  static ArchSpec parse(const std::string& id);
  std::string id() const;
  std::size_t input_dim() const { return channels * height * cols; }
  Shape input_shape(std::size_t batch) const { return {batch, channels, height, cols}; }
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

template <typename Real>
struct NamedTensor {
  std::string name;
  Tensor<Real> tensor;
};

// A feedforward classifier with fixed topology. Parameters are plain tensors;
// forward() records them as tape leaves so the same object can be evaluated
// from several threads, each with its own tape.
template <typename Real>
class Network {
 public:
  explicit Network(ArchSpec arch);

  // He-uniform weights, zero biases.
  void init(std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  std::vector<NamedTensor<Real>>& params() { return params_; }
  const std::vector<NamedTensor<Real>>& params() const { return params_; }
  std::size_t num_parameters() const;

  // input is [N,C,H,W]. If param_vars is non-null it receives the leaf handle of
  // each parameter in params() order.
  Var forward(Tape<Real>& tape, Var input, bool params_require_grad,
              std::vector<Var>* param_vars = nullptr) const;

  // Logits [N,K] without recording gradients.
  Tensor<Real> logits(const Tensor<Real>& input) const;

  template <typename Other>
  Network<Other> cast() const {
    Network<Other> out(arch_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.params()[i].tensor = params_[i].tensor.template cast<Other>();
    }
    return out;
  }

 private:
  ArchSpec arch_;
  std::vector<NamedTensor<Real>> params_;
};

extern template class Network<float>;
extern template class Network<double>;

// Index of the largest entry in each row; ties resolve to the lowest index.
template <typename Real>
std::vector<int> argmax_rows(const Tensor<Real>& logits);

}  // namespace rsoup
