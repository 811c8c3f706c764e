#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "facedyn/tensor.hpp"

namespace facedyn {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  Input,
  Param,
  Matmul,
  Add,
  Mul,
  Concat,
  Stack,
  Slice,
  Sigmoid,
  Tanh,
  Relu,
  Softmax,
  Dropout,
  Mean,
  Sum,
  SquaredError,
  CrossEntropySoftmax,
  BatchNorm,
};

const char* op_name(Op op);

// Running statistics owned by a BatchNorm layer; the tape only borrows them.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

// Reverse-mode tape. Building an expression records nodes and infers shapes
// (shape errors surface immediately, naming the offending node). Values are
// computed by forward(); backward() then accumulates gradients for every
// parameter leaf reachable from the root.
class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  // Leaves. param() binds external storage and is idempotent per tensor, so a
  // weight used by several subgraphs accumulates one gradient.
  NodeId input(Tensor value, std::string name = {});
  NodeId param(Tensor* storage, std::string name = {});

  // Operations.
  NodeId matmul(NodeId a, NodeId b, bool transpose_a = false, bool transpose_b = false);
  NodeId add(NodeId a, NodeId b);  // same shape, [B x F] + [F], or x + [1]
  NodeId mul(NodeId a, NodeId b);  // same shape, or scalar [1] on either side
  NodeId concat(std::span<const NodeId> parts);         // 1-D parts -> 1-D
  NodeId stack(std::span<const NodeId> rows);           // n vectors [w] -> [n x w]
  NodeId slice(NodeId a, std::size_t offset, std::size_t length);  // flat row-major window
  NodeId row(NodeId a, std::size_t r);
  NodeId sigmoid(NodeId a);
  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId softmax(NodeId a);  // rowwise for 2-D, whole vector for 1-D
  NodeId dropout(NodeId a, real rate, std::uint64_t seed, bool training);
  NodeId mean(NodeId a);
  NodeId sum(NodeId a);
  NodeId squared_error(NodeId pred, real target);
  NodeId cross_entropy_softmax(NodeId logits, std::size_t class_id);
  NodeId batchnorm(NodeId x, NodeId scale, NodeId shift, BatchNormState* state, real momentum,
                   real eps, bool training);

  // Evaluation.
  const Tensor& forward(NodeId root);
  void backward(NodeId root);

  const Tensor& value(NodeId id) const;
  const std::vector<std::size_t>& shape(NodeId id) const;
  const Tensor& grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  // Gradient of the last backward() w.r.t. a bound parameter tensor.
  const Tensor& grad_for(const Tensor* storage) const;
  NodeId node_for(const Tensor* storage) const;

  std::size_t size() const { return nodes_.size(); }

  // Activation-sign signature of the last forward pass; used by the gradient
  // checker to detect ReLU kinks crossed by a finite-difference probe.
  // Per element: 0 negative, 1 positive, 2 exactly zero.
  std::vector<std::uint8_t> relu_signature() const;

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    std::vector<std::size_t> shape;
    Tensor value;
    Tensor grad;
    std::string name;
    Tensor* binding = nullptr;          // Param
    bool transpose_a = false;           // Matmul
    bool transpose_b = false;
    std::size_t offset = 0;             // Slice
    std::size_t arg = 0;                // Slice length / CrossEntropy class id
    Tensor aux;                         // Dropout mask / saved softmax probs
    BatchNormState* bn_state = nullptr;
    real bn_momentum = 0;
    real bn_eps = 0;
    bool training = false;
    bool bn_stats_written = false;
    Tensor bn_mu, bn_istd;
  };

  NodeId push(Node node);
  Node& at(NodeId id);
  const Node& at(NodeId id) const;
  void check_exists(NodeId id) const;
  [[noreturn]] void fail(const Node& node, const std::string& message) const;
  void eval(NodeId id);
  void backprop(NodeId id);
  Tensor& ensure_grad(NodeId id);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, NodeId> param_index_;
  bool forward_ran_ = false;
  NodeId forward_root_ = 0;
  bool backward_ran_ = false;
};

}  // namespace facedyn
