#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rescaps/errors.hpp"

namespace rescaps {

class Rng;

namespace autograd {

// One node of the define-by-run computation graph. Leaves (parameters,
// constants) have no backprop function; interior nodes accumulate gradients
// into their parents when the recorded backprop closure runs.
struct Node {
  std::vector<int> dims;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::size_t size() const { return data.size(); }

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace autograd

// Dense 64-bit float tensor of rank 1-4, immutable once produced by an
// operation except for its gradient buffer. Copies are shallow; the
// underlying node is shared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> dims, bool requires_grad = false);
  static Tensor full(std::vector<int> dims, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<int> dims, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  // Fan-in scaled uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  static Tensor uniform_init(std::vector<int> dims, int fan_in, Rng& rng,
                             bool requires_grad = true);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& dims() const { return node_->dims; }
  int dim(int i) const { return node_->dims[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->dims.size()); }
  std::size_t size() const { return node_->data.size(); }

  const std::vector<double>& data() const { return node_->data; }
  // In-place access for leaf updates (optimizer steps, gradient probes).
  std::vector<double>& mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;  // value of a one-element tensor

  std::shared_ptr<autograd::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<autograd::Node> node)
      : node_(std::move(node)) {}
  std::shared_ptr<autograd::Node> node_;

  friend Tensor make_op(std::vector<int>, std::vector<double>,
                        const std::vector<Tensor>&,
                        std::function<void(autograd::Node&)>);
};

// Builds a graph node from parents plus a backprop closure. The closure reads
// node.grad and accumulates into parents' ensure_grad(); it is dropped when
// no parent needs gradients.
Tensor make_op(std::vector<int> dims, std::vector<double> data,
               const std::vector<Tensor>& parents,
               std::function<void(autograd::Node&)> backprop);

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 0;

  int out_extent(int in_extent) const {
    return (in_extent + 2 * padding - kernel) / stride + 1;
  }
};

// Core differentiable operations.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const ConvSpec& spec);
Tensor relu(const Tensor& x);
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor softmax(const Tensor& x, int axis);
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, std::vector<int> dims);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int length);

// Capsule primitives. Vectors live along the last axis.
//
// squash: v = (|s|^2 / (1 + |s|^2)) * s / |s|, continuously extended to 0.
Tensor squash(const Tensor& s);
// Euclidean norm of each vector along the last axis.
Tensor caps_length(const Tensor& v);
// Per-pair linear predictions: u [N,I,d_in], W [I,K,d_out,d_in]
// -> u_hat [N,I,K,d_out] with u_hat[n,i,k] = W[i,k] * u[n,i].
Tensor caps_predict(const Tensor& u, const Tensor& weight);
// s [N,K,d] = sum_i c[n,i,k] * u_hat[n,i,k,:].
Tensor coupling_weighted_sum(const Tensor& couplings, const Tensor& u_hat);
// a [N,I,K] = <u_hat[n,i,k,:], v[n,k,:]>.
Tensor routing_agreement(const Tensor& u_hat, const Tensor& v);

// Reverse-mode pass from a scalar loss. Gradients of every reachable
// requires_grad tensor accumulate until explicitly zeroed.
void backward(const Tensor& loss);

std::string dims_to_string(const std::vector<int>& dims);

}  // namespace rescaps
