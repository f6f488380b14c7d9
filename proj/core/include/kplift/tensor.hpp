#pragma once

// Dense row-major binary64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto an immutable node. Every op that sees an
// input with requires_grad() records a backward closure on its output, so
// the graph is rebuilt from scratch on every forward pass. Gradients are
// never stored on the nodes; gradient_of() walks the tape and returns them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace kplift {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

using GradSinks = std::span<std::vector<double>*>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives d(loss)/d(this) and accumulates into the parents' buffers.
  // A sink is null when the corresponding parent does not need a gradient.
  std::function<void(const std::vector<double>&, GradSinks)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  // Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> values);

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }
  std::span<const double> data() const { return node_->data; }
  double item() const;
  double operator[](std::size_t flat_index) const { return node_->data[flat_index]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }

  // Same values, cut from the graph.
  Tensor detach() const;

  // In-place access for leaves only (optimizers, initializers, loaders).
  std::span<double> mutable_data();

  const detail::Node* id() const { return node_.get(); }

  // Internal: used by op implementations.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::vector<Tensor> inputs,
                            std::function<void(const std::vector<double>&, detail::GradSinks)> backward);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Gradients of a scalar with respect to a set of tensors.
class Gradients {
 public:
  // Zero tensor of the parameter's shape when the loss does not depend on it.
  Tensor operator[](const Tensor& param) const;
  std::span<const double> raw(const Tensor& param) const;
  bool contains(const Tensor& param) const;

 private:
  friend Gradients gradient_of(const Tensor&, std::span<const Tensor>);
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
  std::unordered_map<const detail::Node*, Shape> shapes_;
};

// Reverse-mode sweep from `loss` (must be a single element). Every node is
// visited once, in reverse topological order.
Gradients gradient_of(const Tensor& loss, std::span<const Tensor> params);
Gradients gradient_of(const Tensor& loss, std::initializer_list<Tensor> params);

// ---------------------------------------------------------------------------
// Forward op set

// 2-D matrix product.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched product of 3-D tensors [B,m,k] x [B,k,n]; either side may be
// transposed in its last two axes.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
// x[..., in] * weight[in, out] + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
// Elementwise Huber penalty of a residual with threshold `delta`.
Tensor huber(const Tensor& residual, double delta);

// Along the last axis.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// Mean over rows of -log softmax(logits[row])[target[row]]; logits is [N,K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reduces the last axis away.
Tensor sum_last(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor transpose_last2(const Tensor& a);
// Rows of a 2-D tensor, in the given order.
Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows);
// Inverse of index_rows: a [rows, C] result with src row i at rows[i], zeros elsewhere.
Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t total_rows);

// Normalizes the last axis to zero mean and unit variance.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);

// Multi-head scaled dot-product attention. q is [B,Tq,H*dh]; k and v are
// [B,Tk,H*dh]. Returns [B,Tq,H*dh].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

// ---------------------------------------------------------------------------
// Branch trace: a hash of every data-dependent branch taken by the piecewise
// ops (relu, abs, huber). Finite-difference checks use it to spot kinks.

class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  std::uint64_t value() const { return hash_; }

  static void record(std::uint64_t bits);
  static bool active();

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  BranchTrace* previous_ = nullptr;
};

}  // namespace kplift
