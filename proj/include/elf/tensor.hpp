#pragma once

#include <functional>
#include <memory>
#include <utility>

#include "elf/common.hpp"

namespace elf {

template <typename S>
class Tape;

/// Dense row-major N-D array. Values are immutable once constructed; copies
/// share the underlying buffer. A tensor may additionally carry a handle into
/// a Tape, in which case ops record backward closures for it.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape)
      : data_(std::make_shared<std::vector<S>>(numel(shape), S(0))), shape_(std::move(shape)) {}

  Tensor(Shape shape, std::vector<S> values) : shape_(std::move(shape)) {
    require(static_cast<Index>(values.size()) == numel(shape_),
            "tensor: buffer length " + std::to_string(values.size()) +
                " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<S>>(std::move(values));
  }

  Tensor(Shape shape, std::shared_ptr<const std::vector<S>> data)
      : data_(std::move(data)), shape_(std::move(shape)) {
    require(static_cast<Index>(data_->size()) == numel(shape_), "tensor: storage/shape mismatch");
  }

  static Tensor full(Shape shape, S value) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<S>>(numel(t.shape_), value);
    return t;
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }
  static Tensor scalar(S value) { return full(Shape{}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_ ? static_cast<Index>(data_->size()) : 0; }
  bool defined() const { return data_ != nullptr; }

  const S* data() const { return data_->data(); }
  const std::vector<S>& values() const { return *data_; }
  std::shared_ptr<const std::vector<S>> storage() const { return data_; }
  S at(Index flat) const { return (*data_)[static_cast<std::size_t>(flat)]; }
  S item() const {
    require(size() == 1, "item: tensor is not scalar, shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same buffer and shape, detached from any tape.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_->size());
    for (std::size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<T>((*data_)[i]);
    return Tensor<T>(shape_, std::move(out));
  }

 private:
  friend class Tape<S>;
  std::shared_ptr<const std::vector<S>> data_;
  Shape shape_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

/// Recorded computation graph for one forward/backward pass. Nodes are
/// appended in forward order, so inputs always precede their consumers and a
/// single reverse sweep visits each node exactly once. Single-writer: one
/// pass owns the tape; backward() may run once.
template <typename S>
class Tape {
 public:
  /// Backward closure: receives the tape (to accumulate into input grad
  /// buffers) and this node's own output gradient.
  using BackFn = std::function<void(Tape&, const std::vector<S>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Register a value as a differentiable leaf. Shares the buffer.
  Tensor<S> leaf(const Tensor<S>& value) {
    Tensor<S> t = value.detached();
    t.tape_ = this;
    t.node_ = add_node(value.size(), nullptr);
    return t;
  }

  /// Create a tracked op output with its backward closure.
  Tensor<S> emit(Shape shape, std::shared_ptr<const std::vector<S>> data, BackFn back) {
    Tensor<S> t(std::move(shape), std::move(data));
    t.tape_ = this;
    t.node_ = add_node(t.size(), std::move(back));
    return t;
  }

  /// Gradient buffer of a node, zero-initialized on first touch.
  std::vector<S>& grad_buf(int node, Index size) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    if (!n.has_grad) {
      n.grad.assign(static_cast<std::size_t>(size), S(0));
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(const Tensor<S>& loss) {
    require(!consumed_, "backward: graph already consumed");
    require(loss.tape() == this, "backward: loss does not belong to this graph");
    require(loss.size() == 1, "backward: loss is not scalar, shape " + shape_str(loss.shape()));
    consumed_ = true;
    grad_buf(loss.node(), 1)[0] = S(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.back) n.back(*this, n.grad);
      if (n.back) {
        n.grad.clear();  // interior grads are not queried afterwards
        n.has_grad = false;
      }
    }
  }

  /// Gradient of the backward'd loss w.r.t. a tensor of this tape.
  /// Leaves never touched by the loss get zeros.
  Tensor<S> grad(const Tensor<S>& t) const {
    require(t.tape() == this, "grad: tensor does not belong to this graph");
    const Node& n = nodes_[static_cast<std::size_t>(t.node())];
    if (!n.has_grad) return Tensor<S>::zeros(t.shape());
    return Tensor<S>(t.shape(), n.grad);
  }

  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    BackFn back;  // null for leaves
    std::vector<S> grad;
    Index size = 0;
    bool has_grad = false;
  };

  int add_node(Index size, BackFn back) {
    require(!consumed_, "tape: cannot extend a consumed graph");
    nodes_.push_back(Node{std::move(back), {}, size, false});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {

/// Tape shared by a set of op inputs; errors on a mix of two tapes.
template <typename S>
Tape<S>* common_tape(std::initializer_list<const Tensor<S>*> inputs) {
  Tape<S>* tape = nullptr;
  for (const Tensor<S>* t : inputs) {
    if (!t->tracked()) continue;
    if (tape == nullptr) tape = t->tape();
    else require(tape == t->tape(), "op: inputs belong to different graphs");
  }
  return tape;
}

}  // namespace detail
}  // namespace elf
