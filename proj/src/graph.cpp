#include "facedyn/graph.hpp"

#include <algorithm>
#include <cmath>

namespace facedyn {

namespace {

// C (m x n) (+)= opA (m x k) * opB (k x n). Raw operands keep their own row
// strides; the flags select transposed reads. Loop orders keep the inner
// accesses contiguous for the flag combinations the model actually uses.
void gemm(bool accumulate, real* C, std::size_t m, std::size_t n, std::size_t k, const real* A,
          std::size_t lda, bool ta, const real* B, std::size_t ldb, bool tb) {
  if (!accumulate) std::fill(C, C + m * n, real(0));
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      real* c_row = C + i * n;
      const real* a_row = A + i * lda;
      for (std::size_t p = 0; p < k; ++p) {
        const real a = a_row[p];
        const real* b_row = B + p * ldb;
        for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const real* a_row = A + i * lda;
      real* c_row = C + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const real* b_row = B + j * ldb;
        real s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a_row[p] * b_row[p];
        c_row[j] += s;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const real* a_row = A + p * lda;
      const real* b_row = B + p * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        const real a = a_row[i];
        real* c_row = C + i * n;
        for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      real* c_row = C + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const real* b_row = B + j * ldb;
        real s = 0;
        for (std::size_t p = 0; p < k; ++p) s += A[p * lda + i] * b_row[p];
        c_row[j] += s;
      }
    }
  }
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Matmul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Concat: return "concat";
    case Op::Stack: return "stack";
    case Op::Slice: return "slice";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Softmax: return "softmax";
    case Op::Dropout: return "dropout";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
    case Op::SquaredError: return "squared_error";
    case Op::CrossEntropySoftmax: return "cross_entropy_softmax";
    case Op::BatchNorm: return "batchnorm";
  }
  return "?";
}

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  // Appending invalidates previously computed values only logically; a new
  // forward() is required before the next backward().
  backward_ran_ = false;
  return NodeId(nodes_.size() - 1);
}

Tape::Node& Tape::at(NodeId id) { return nodes_[id]; }
const Tape::Node& Tape::at(NodeId id) const { return nodes_[id]; }

void Tape::check_exists(NodeId id) const {
  if (id >= nodes_.size()) throw Error("node id " + std::to_string(id) + " out of range");
}

void Tape::fail(const Node& node, const std::string& message) const {
  const std::string label = node.name.empty() ? std::string(op_name(node.op)) : node.name;
  throw ShapeError("node #" + std::to_string(&node - nodes_.data()) + " (" + label + "): " + message);
}

NodeId Tape::input(Tensor value, std::string name) {
  Node n;
  n.op = Op::Input;
  n.shape = value.shape();
  n.value = std::move(value);
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Tape::param(Tensor* storage, std::string name) {
  if (storage == nullptr) throw Error("param storage must be bound");
  if (auto it = param_index_.find(storage); it != param_index_.end()) return it->second;
  Node n;
  n.op = Op::Param;
  n.shape = storage->shape();
  n.binding = storage;
  n.name = std::move(name);
  NodeId id = push(std::move(n));
  param_index_.emplace(storage, id);
  return id;
}

NodeId Tape::matmul(NodeId a, NodeId b, bool transpose_a, bool transpose_b) {
  check_exists(a);
  check_exists(b);
  Node n;
  n.op = Op::Matmul;
  n.inputs = {a, b};
  n.transpose_a = transpose_a;
  n.transpose_b = transpose_b;
  const auto& sa = at(a).shape;
  const auto& sb = at(b).shape;
  if (sa.size() != 2) fail(n, "lhs must be 2-D, got " + shape_to_string(sa));
  const std::size_t m = transpose_a ? sa[1] : sa[0];
  const std::size_t k = transpose_a ? sa[0] : sa[1];
  if (sb.size() == 1) {
    if (transpose_b) fail(n, "cannot transpose 1-D rhs");
    if (sb[0] != k) fail(n, "inner dims differ: " + shape_to_string(sa) + " vs " + shape_to_string(sb));
    n.shape = {m};
  } else if (sb.size() == 2) {
    const std::size_t kb = transpose_b ? sb[1] : sb[0];
    const std::size_t nn = transpose_b ? sb[0] : sb[1];
    if (kb != k) fail(n, "inner dims differ: " + shape_to_string(sa) + " vs " + shape_to_string(sb));
    n.shape = {m, nn};
  } else {
    fail(n, "rhs must be 1-D or 2-D, got " + shape_to_string(sb));
  }
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_exists(a);
  check_exists(b);
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  const auto& sa = at(a).shape;
  const auto& sb = at(b).shape;
  const bool same = sa == sb;
  const bool row_bcast = sa.size() == 2 && sb.size() == 1 && sb[0] == sa[1];
  const bool scalar_bcast = sb.size() == 1 && sb[0] == 1;
  if (!same && !row_bcast && !scalar_bcast) {
    fail(n, "cannot add " + shape_to_string(sa) + " and " + shape_to_string(sb));
  }
  n.shape = sa;
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check_exists(a);
  check_exists(b);
  Node n;
  n.op = Op::Mul;
  n.inputs = {a, b};
  const auto& sa = at(a).shape;
  const auto& sb = at(b).shape;
  const bool a_scalar = sa.size() == 1 && sa[0] == 1;
  const bool b_scalar = sb.size() == 1 && sb[0] == 1;
  if (sa == sb) {
    n.shape = sa;
  } else if (b_scalar) {
    n.shape = sa;
  } else if (a_scalar) {
    n.shape = sb;
  } else {
    fail(n, "cannot multiply " + shape_to_string(sa) + " and " + shape_to_string(sb));
  }
  return push(std::move(n));
}

NodeId Tape::concat(std::span<const NodeId> parts) {
  Node n;
  n.op = Op::Concat;
  if (parts.empty()) fail(n, "concat of zero tensors");
  std::size_t total = 0;
  for (NodeId id : parts) {
    check_exists(id);
    if (at(id).shape.size() != 1) fail(n, "concat expects 1-D inputs");
    total += at(id).shape[0];
    n.inputs.push_back(id);
  }
  n.shape = {total};
  return push(std::move(n));
}

NodeId Tape::stack(std::span<const NodeId> rows) {
  Node n;
  n.op = Op::Stack;
  if (rows.empty()) fail(n, "stack of zero tensors");
  const auto& first = at(rows.front()).shape;
  for (NodeId id : rows) {
    check_exists(id);
    if (at(id).shape.size() != 1 || at(id).shape != first) fail(n, "stack expects equal-width vectors");
    n.inputs.push_back(id);
  }
  n.shape = {rows.size(), first[0]};
  return push(std::move(n));
}

NodeId Tape::slice(NodeId a, std::size_t offset, std::size_t length) {
  check_exists(a);
  Node n;
  n.op = Op::Slice;
  n.inputs = {a};
  n.offset = offset;
  n.arg = length;
  std::size_t total = 1;
  for (std::size_t d : at(a).shape) total *= d;
  if (length == 0 || offset + length > total) {
    fail(n, "slice [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                ") outside tensor of " + std::to_string(total) + " elements");
  }
  n.shape = {length};
  return push(std::move(n));
}

NodeId Tape::row(NodeId a, std::size_t r) {
  check_exists(a);
  const auto& s = at(a).shape;
  if (s.size() != 2) throw ShapeError("row() expects a 2-D node");
  if (r >= s[0]) throw ShapeError("row " + std::to_string(r) + " out of range for " + shape_to_string(s));
  return slice(a, r * s[1], s[1]);
}

NodeId Tape::sigmoid(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::Sigmoid;
  n.inputs = {a};
  n.shape = at(a).shape;
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::Tanh;
  n.inputs = {a};
  n.shape = at(a).shape;
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::Relu;
  n.inputs = {a};
  n.shape = at(a).shape;
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::Softmax;
  n.inputs = {a};
  const auto& s = at(a).shape;
  if (s.size() > 2) fail(n, "softmax expects 1-D or 2-D input");
  n.shape = s;
  return push(std::move(n));
}

NodeId Tape::dropout(NodeId a, real rate, std::uint64_t seed, bool training) {
  check_exists(a);
  Node n;
  n.op = Op::Dropout;
  n.inputs = {a};
  n.shape = at(a).shape;
  if (rate < 0 || rate >= 1) throw Error("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (training && rate > 0) {
    // The scaled mask is drawn once at build time; repeated forward passes
    // reuse it, keeping evaluation a pure function of the leaves.
    std::size_t total = 1;
    for (std::size_t d : n.shape) total *= d;
    Rng rng(seed);
    Tensor mask(n.shape);
    const real keep_scale = real(1) / (real(1) - rate);
    for (std::size_t i = 0; i < total; ++i) {
      mask[i] = rng.uniform(0, 1) < rate ? real(0) : keep_scale;
    }
    n.aux = std::move(mask);
  }
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::Mean;
  n.inputs = {a};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  check_exists(a);
  Node n;
  n.op = Op::Sum;
  n.inputs = {a};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Tape::squared_error(NodeId pred, real target) {
  check_exists(pred);
  Node n;
  n.op = Op::SquaredError;
  n.inputs = {pred};
  const auto& s = at(pred).shape;
  if (!(s.size() == 1 && s[0] == 1)) fail(n, "squared_error expects a [1] prediction, got " + shape_to_string(s));
  n.aux = Tensor::scalar(target);
  n.shape = {1};
  return push(std::move(n));
}

NodeId Tape::cross_entropy_softmax(NodeId logits, std::size_t class_id) {
  check_exists(logits);
  Node n;
  n.op = Op::CrossEntropySoftmax;
  n.inputs = {logits};
  const auto& s = at(logits).shape;
  if (s.size() != 1) fail(n, "cross_entropy_softmax expects 1-D logits");
  if (class_id >= s[0]) {
    fail(n, "class id " + std::to_string(class_id) + " out of range for " + std::to_string(s[0]) + " classes");
  }
  n.arg = class_id;
  n.shape = {1};
  return push(std::move(n));
}

NodeId Tape::batchnorm(NodeId x, NodeId scale, NodeId shift, BatchNormState* state, real momentum,
                       real eps, bool training) {
  check_exists(x);
  check_exists(scale);
  check_exists(shift);
  Node n;
  n.op = Op::BatchNorm;
  n.inputs = {x, scale, shift};
  n.bn_state = state;
  n.bn_momentum = momentum;
  n.bn_eps = eps;
  n.training = training;
  const auto& sx = at(x).shape;
  const std::size_t features = sx.size() == 2 ? sx[1] : sx[0];
  if (sx.size() > 2) fail(n, "batchnorm expects 1-D or 2-D input");
  if (at(scale).shape != std::vector<std::size_t>{features} ||
      at(shift).shape != std::vector<std::size_t>{features}) {
    fail(n, "scale/shift must be [" + std::to_string(features) + "]");
  }
  if (state == nullptr || state->running_mean.numel() != features || state->running_var.numel() != features) {
    fail(n, "running statistics not sized for " + std::to_string(features) + " features");
  }
  if (training && (sx.size() != 2 || sx[0] < 2)) {
    fail(n, "training batchnorm needs a batch of at least 2, got " + shape_to_string(sx));
  }
  n.shape = sx;
  return push(std::move(n));
}

const Tensor& Tape::forward(NodeId root) {
  check_exists(root);
  for (NodeId i = 0; i <= root; ++i) eval(i);
  forward_ran_ = true;
  forward_root_ = root;
  backward_ran_ = false;
  return nodes_[root].value;
}

void Tape::eval(NodeId id) {
  Node& n = nodes_[id];
  switch (n.op) {
    case Op::Input:
      break;
    case Op::Param:
      n.value = *n.binding;
      if (n.value.shape() != n.shape) fail(n, "bound parameter changed shape");
      break;
    case Op::Matmul: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      const std::size_t m = n.shape[0];
      const std::size_t nn = n.shape.size() == 2 ? n.shape[1] : 1;
      const std::size_t k = n.transpose_a ? a.dim(0) : a.dim(1);
      Tensor out(n.shape);
      gemm(false, out.data(), m, nn, k, a.data(), a.dim(1), n.transpose_a, b.data(),
           b.ndim() == 2 ? b.dim(1) : 1, n.transpose_b);
      n.value = std::move(out);
      break;
    }
    case Op::Add: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      Tensor out = a;
      if (a.same_shape(b)) {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
      } else if (b.numel() == 1) {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[0];
      } else {
        const std::size_t w = b.numel();
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i % w];
      }
      n.value = std::move(out);
      break;
    }
    case Op::Mul: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      if (a.same_shape(b)) {
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
        n.value = std::move(out);
      } else if (b.numel() == 1) {
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[0];
        n.value = std::move(out);
      } else {
        Tensor out = b;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= a[0];
        n.value = std::move(out);
      }
      break;
    }
    case Op::Concat: {
      Tensor out(n.shape);
      std::size_t off = 0;
      for (NodeId in : n.inputs) {
        const Tensor& part = nodes_[in].value;
        std::copy(part.data(), part.data() + part.numel(), out.data() + off);
        off += part.numel();
      }
      n.value = std::move(out);
      break;
    }
    case Op::Stack: {
      Tensor out(n.shape);
      const std::size_t w = n.shape[1];
      for (std::size_t r = 0; r < n.inputs.size(); ++r) {
        const Tensor& part = nodes_[n.inputs[r]].value;
        std::copy(part.data(), part.data() + w, out.data() + r * w);
      }
      n.value = std::move(out);
      break;
    }
    case Op::Slice: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      Tensor out(n.shape);
      std::copy(a.data() + n.offset, a.data() + n.offset + n.arg, out.data());
      n.value = std::move(out);
      break;
    }
    case Op::Sigmoid: {
      Tensor out = nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = real(1) / (real(1) + std::exp(-out[i]));
      n.value = std::move(out);
      break;
    }
    case Op::Tanh: {
      Tensor out = nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
      n.value = std::move(out);
      break;
    }
    case Op::Relu: {
      Tensor out = nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0 ? out[i] : real(0);
      n.value = std::move(out);
      break;
    }
    case Op::Softmax: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      Tensor out = a;
      const std::size_t w = a.ndim() == 2 ? a.dim(1) : a.numel();
      for (std::size_t r = 0; r < out.numel() / w; ++r) {
        real* x = out.data() + r * w;
        real mx = x[0];
        for (std::size_t i = 1; i < w; ++i) mx = std::max(mx, x[i]);
        real z = 0;
        for (std::size_t i = 0; i < w; ++i) {
          x[i] = std::exp(x[i] - mx);
          z += x[i];
        }
        for (std::size_t i = 0; i < w; ++i) x[i] /= z;
      }
      n.value = std::move(out);
      break;
    }
    case Op::Dropout: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      if (n.aux.empty()) {
        n.value = a;
      } else {
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= n.aux[i];
        n.value = std::move(out);
      }
      break;
    }
    case Op::Mean: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      real s = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
      n.value = Tensor::scalar(s / real(a.numel()));
      break;
    }
    case Op::Sum: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      real s = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
      n.value = Tensor::scalar(s);
      break;
    }
    case Op::SquaredError: {
      const real d = nodes_[n.inputs[0]].value[0] - n.aux[0];
      n.value = Tensor::scalar(d * d);
      break;
    }
    case Op::CrossEntropySoftmax: {
      const Tensor& logits = nodes_[n.inputs[0]].value;
      const std::size_t w = logits.numel();
      real mx = logits[0];
      for (std::size_t i = 1; i < w; ++i) mx = std::max(mx, logits[i]);
      real z = 0;
      Tensor probs({w});
      for (std::size_t i = 0; i < w; ++i) {
        probs[i] = std::exp(logits[i] - mx);
        z += probs[i];
      }
      for (std::size_t i = 0; i < w; ++i) probs[i] /= z;
      // log-sum-exp form; avoids log of a denormal probability
      n.value = Tensor::scalar(std::log(z) - (logits[n.arg] - mx));
      n.aux = std::move(probs);
      break;
    }
    case Op::BatchNorm: {
      const Tensor& x = nodes_[n.inputs[0]].value;
      const Tensor& scale = nodes_[n.inputs[1]].value;
      const Tensor& shift = nodes_[n.inputs[2]].value;
      const std::size_t f = scale.numel();
      const std::size_t batch = x.numel() / f;
      Tensor out(n.shape);
      if (n.training) {
        Tensor mu({f}), istd({f});
        for (std::size_t j = 0; j < f; ++j) {
          real m = 0;
          for (std::size_t b = 0; b < batch; ++b) m += x[b * f + j];
          m /= real(batch);
          real v = 0;
          for (std::size_t b = 0; b < batch; ++b) {
            const real d = x[b * f + j] - m;
            v += d * d;
          }
          v /= real(batch);
          mu[j] = m;
          istd[j] = real(1) / std::sqrt(v + n.bn_eps);
          if (!n.bn_stats_written) {
            // Unbiased batch variance feeds the running estimate.
            const real vu = batch > 1 ? v * real(batch) / real(batch - 1) : v;
            n.bn_state->running_mean[j] = n.bn_momentum * n.bn_state->running_mean[j] + (1 - n.bn_momentum) * m;
            n.bn_state->running_var[j] = n.bn_momentum * n.bn_state->running_var[j] + (1 - n.bn_momentum) * vu;
          }
          for (std::size_t b = 0; b < batch; ++b) {
            out[b * f + j] = scale[j] * (x[b * f + j] - m) * istd[j] + shift[j];
          }
        }
        n.bn_stats_written = true;
        n.bn_mu = std::move(mu);
        n.bn_istd = std::move(istd);
      } else {
        Tensor istd({f});
        for (std::size_t j = 0; j < f; ++j) {
          istd[j] = real(1) / std::sqrt(n.bn_state->running_var[j] + n.bn_eps);
        }
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < f; ++j) {
            out[b * f + j] = scale[j] * (x[b * f + j] - n.bn_state->running_mean[j]) * istd[j] + shift[j];
          }
        }
        n.bn_mu = n.bn_state->running_mean;
        n.bn_istd = std::move(istd);
      }
      n.value = std::move(out);
      break;
    }
  }
}

void Tape::backward(NodeId root) {
  check_exists(root);
  if (!forward_ran_ || forward_root_ != root) {
    throw Error("backward requires a prior forward over the same root");
  }
  const Node& r = nodes_[root];
  if (r.value.numel() != 1) {
    throw Error("backward requires a scalar root, got " + shape_to_string(r.value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  ensure_grad(root)[0] = real(1);
  for (NodeId i = root + 1; i-- > 0;) {
    if (!nodes_[i].grad.empty()) backprop(i);
  }
  // Unreached parameters hold zero gradients.
  for (auto& [storage, id] : param_index_) {
    (void)storage;
    ensure_grad(id);
  }
  backward_ran_ = true;
}

Tensor& Tape::ensure_grad(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.shape);
  return n.grad;
}

void Tape::backprop(NodeId id) {
  Node& n = nodes_[id];
  const Tensor& g = n.grad;
  switch (n.op) {
    case Op::Input:
    case Op::Param:
      break;
    case Op::Matmul: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      const std::size_t m = n.shape[0];
      const std::size_t nn = n.shape.size() == 2 ? n.shape[1] : 1;
      const std::size_t k = n.transpose_a ? a.dim(0) : a.dim(1);
      const std::size_t ldb = b.ndim() == 2 ? b.dim(1) : 1;
      Tensor& da = ensure_grad(n.inputs[0]);
      Tensor& db = ensure_grad(n.inputs[1]);
      if (!n.transpose_a) {
        gemm(true, da.data(), m, k, nn, g.data(), nn, false, b.data(), ldb, !n.transpose_b);
      } else {
        gemm(true, da.data(), k, m, nn, b.data(), ldb, n.transpose_b, g.data(), nn, true);
      }
      if (!n.transpose_b) {
        gemm(true, db.data(), k, nn, m, a.data(), a.dim(1), !n.transpose_a, g.data(), nn, false);
      } else {
        gemm(true, db.data(), nn, k, m, g.data(), nn, true, a.data(), a.dim(1), n.transpose_a);
      }
      break;
    }
    case Op::Add: {
      Tensor& da = ensure_grad(n.inputs[0]);
      Tensor& db = ensure_grad(n.inputs[1]);
      for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i];
      if (db.numel() == g.numel()) {
        for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i];
      } else if (db.numel() == 1) {
        for (std::size_t i = 0; i < g.numel(); ++i) db[0] += g[i];
      } else {
        const std::size_t w = db.numel();
        for (std::size_t i = 0; i < g.numel(); ++i) db[i % w] += g[i];
      }
      break;
    }
    case Op::Mul: {
      const Tensor& a = nodes_[n.inputs[0]].value;
      const Tensor& b = nodes_[n.inputs[1]].value;
      Tensor& da = ensure_grad(n.inputs[0]);
      Tensor& db = ensure_grad(n.inputs[1]);
      if (a.same_shape(b)) {
        for (std::size_t i = 0; i < g.numel(); ++i) {
          da[i] += g[i] * b[i];
          db[i] += g[i] * a[i];
        }
      } else if (b.numel() == 1) {
        for (std::size_t i = 0; i < g.numel(); ++i) {
          da[i] += g[i] * b[0];
          db[0] += g[i] * a[i];
        }
      } else {
        for (std::size_t i = 0; i < g.numel(); ++i) {
          da[0] += g[i] * b[i];
          db[i] += g[i] * a[0];
        }
      }
      break;
    }
    case Op::Concat: {
      std::size_t off = 0;
      for (NodeId in : n.inputs) {
        Tensor& d = ensure_grad(in);
        for (std::size_t i = 0; i < d.numel(); ++i) d[i] += g[off + i];
        off += d.numel();
      }
      break;
    }
    case Op::Stack: {
      const std::size_t w = n.shape[1];
      for (std::size_t r = 0; r < n.inputs.size(); ++r) {
        Tensor& d = ensure_grad(n.inputs[r]);
        for (std::size_t i = 0; i < w; ++i) d[i] += g[r * w + i];
      }
      break;
    }
    case Op::Slice: {
      Tensor& d = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < n.arg; ++i) d[n.offset + i] += g[i];
      break;
    }
    case Op::Sigmoid: {
      Tensor& d = ensure_grad(n.inputs[0]);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * y[i] * (real(1) - y[i]);
      break;
    }
    case Op::Tanh: {
      Tensor& d = ensure_grad(n.inputs[0]);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * (real(1) - y[i] * y[i]);
      break;
    }
    case Op::Relu: {
      Tensor& d = ensure_grad(n.inputs[0]);
      const Tensor& x = nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (x[i] > 0) d[i] += g[i];
      }
      break;
    }
    case Op::Softmax: {
      Tensor& d = ensure_grad(n.inputs[0]);
      const Tensor& p = n.value;
      const std::size_t w = p.ndim() == 2 ? p.dim(1) : p.numel();
      for (std::size_t r = 0; r < p.numel() / w; ++r) {
        const real* pr = p.data() + r * w;
        const real* gr = g.data() + r * w;
        real dot = 0;
        for (std::size_t i = 0; i < w; ++i) dot += pr[i] * gr[i];
        real* dr = d.data() + r * w;
        for (std::size_t i = 0; i < w; ++i) dr[i] += pr[i] * (gr[i] - dot);
      }
      break;
    }
    case Op::Dropout: {
      Tensor& d = ensure_grad(n.inputs[0]);
      if (n.aux.empty()) {
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
      } else {
        for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * n.aux[i];
      }
      break;
    }
    case Op::Mean: {
      Tensor& d = ensure_grad(n.inputs[0]);
      const real s = g[0] / real(d.numel());
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += s;
      break;
    }
    case Op::Sum: {
      Tensor& d = ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += g[0];
      break;
    }
    case Op::SquaredError: {
      Tensor& d = ensure_grad(n.inputs[0]);
      d[0] += g[0] * 2 * (nodes_[n.inputs[0]].value[0] - n.aux[0]);
      break;
    }
    case Op::CrossEntropySoftmax: {
      Tensor& d = ensure_grad(n.inputs[0]);
      const Tensor& p = n.aux;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        d[i] += g[0] * (p[i] - (i == n.arg ? real(1) : real(0)));
      }
      break;
    }
    case Op::BatchNorm: {
      const Tensor& x = nodes_[n.inputs[0]].value;
      const Tensor& scale = nodes_[n.inputs[1]].value;
      Tensor& dx = ensure_grad(n.inputs[0]);
      Tensor& dscale = ensure_grad(n.inputs[1]);
      Tensor& dshift = ensure_grad(n.inputs[2]);
      const std::size_t f = scale.numel();
      const std::size_t batch = x.numel() / f;
      for (std::size_t j = 0; j < f; ++j) {
        const real mu = n.bn_mu[j];
        const real istd = n.bn_istd[j];
        real sum_g = 0, sum_gx = 0;
        for (std::size_t b = 0; b < batch; ++b) {
          const real gv = g[b * f + j];
          sum_g += gv;
          sum_gx += gv * (x[b * f + j] - mu) * istd;
        }
        dshift[j] += sum_g;
        dscale[j] += sum_gx;
        if (n.training) {
          for (std::size_t b = 0; b < batch; ++b) {
            const real xhat = (x[b * f + j] - mu) * istd;
            dx[b * f + j] += scale[j] * istd / real(batch) *
                             (real(batch) * g[b * f + j] - sum_g - xhat * sum_gx);
          }
        } else {
          for (std::size_t b = 0; b < batch; ++b) {
            dx[b * f + j] += g[b * f + j] * scale[j] * istd;
          }
        }
      }
      break;
    }
  }
}

const Tensor& Tape::value(NodeId id) const {
  check_exists(id);
  if (!forward_ran_ || id > forward_root_) throw Error("value requested before forward");
  return at(id).value;
}

const std::vector<std::size_t>& Tape::shape(NodeId id) const {
  check_exists(id);
  return at(id).shape;
}

const Tensor& Tape::grad(NodeId id) const {
  check_exists(id);
  if (!backward_ran_) throw Error("gradient requested before backward");
  const Node& n = at(id);
  if (n.grad.empty()) throw Error("node #" + std::to_string(id) + " has no gradient");
  return n.grad;
}

bool Tape::has_grad(NodeId id) const {
  check_exists(id);
  return !at(id).grad.empty();
}

const Tensor& Tape::grad_for(const Tensor* storage) const {
  auto it = param_index_.find(storage);
  if (it == param_index_.end()) throw Error("tensor is not a bound parameter of this tape");
  return grad(it->second);
}

NodeId Tape::node_for(const Tensor* storage) const {
  auto it = param_index_.find(storage);
  if (it == param_index_.end()) throw Error("tensor is not a bound parameter of this tape");
  return it->second;
}

std::vector<std::uint8_t> Tape::relu_signature() const {
  if (!forward_ran_) throw Error("relu_signature requires a prior forward");
  std::vector<std::uint8_t> sig;
  for (const Node& n : nodes_) {
    if (n.op != Op::Relu) continue;
    const Tensor& x = nodes_[n.inputs[0]].value;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      sig.push_back(x[i] > 0 ? 1 : (x[i] == 0 ? 2 : 0));
    }
  }
  return sig;
}

}  // namespace facedyn
