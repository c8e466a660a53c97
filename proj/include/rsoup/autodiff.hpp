#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "rsoup/tensor.hpp"

namespace rsoup {

// Handle to a tensor recorded on a Tape.
struct Var {
  std::size_t index = 0;
};

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Reverse-mode tape. Nodes are appended in execution order, so the node list
// is always a topological order. A tape belongs to one thread.
//
// Batched ops treat the leading dimension as the example axis; every per-row
// result is computed with the same arithmetic order regardless of how many
// rows share the batch.
template <typename Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor<Real> value, bool requires_grad = false);

  const Tensor<Real>& value(Var v) const { return nodes_.at(v.index).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }
  // Gradient of the last backward() target; throws if v was not reached.
  const Tensor<Real>& grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Populates gradients for every requires_grad node reachable from loss.
  // A tape supports a single backward pass; a second call throws.
  void backward(Var loss);

  Var matmul(Var a, Var b);                    // [m,k] x [k,n] -> [m,n]
  Var linear(Var x, Var weight, Var bias);     // x[N,in], W[out,in], b[out] -> [N,out]
  Var conv2d(Var x, Var weight, Var bias, Conv2dParams p);  // NCHW, OIHW, O
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, Real c);
  Var relu(Var a);
  Var avg_pool2d(Var a, std::size_t k);
  Var flatten(Var a);                          // [N,...] -> [N,prod(...)]
  Var softmax(Var a);                          // along the last axis
  Var log_softmax(Var a);
  // Per-row losses: [N,K] -> [N]; a rank-1 [K] input yields a scalar.
  Var cross_entropy(Var logits, std::span<const int> labels);
  // KL(softmax(p) || softmax(q)) per row, same shape convention.
  Var kl_divergence(Var logits_p, Var logits_q);
  Var sum(Var a);
  Var mean(Var a);

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<std::size_t> parents;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Var record(Tensor<Real> value, std::vector<std::size_t> parents,
             std::function<void(Tape&, std::size_t)> backward);
  Tensor<Real>& grad_slot(std::size_t i);
  bool needs(std::size_t i) const { return nodes_[i].requires_grad; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace rsoup
