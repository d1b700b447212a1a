#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "stf/tensor.hpp"

namespace stf {

// Handle into a Tape. Plain index, but a distinct type so call sites read well.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops append nodes whose closures pull incoming gradients
// with grad()/has_grad() and accumulate into their parents' grad buffers.
// Gradient buffers are allocated lazily so unused branches cost nothing on
// the backward pass.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // empty until first touched
    std::function<void(Tape&, Var)> back;
  };

  Var leaf(Tensor<T> v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var push(Tensor<T> v, std::function<void(Tape&, Var)> back) {
    nodes_.push_back(Node{std::move(v), {}, std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& val(Var v) const { return nodes_[check(v)].val; }
  Tensor<T>& val(Var v) { return nodes_[check(v)].val; }

  bool has_grad(Var v) const { return !nodes_[check(v)].grad.empty(); }

  Tensor<T>& grad(Var v) {
    Node& n = nodes_[check(v)];
    if (n.grad.empty()) n.grad = Tensor<T>::zeros_like(n.val);
    return n.grad;
  }

  // Seeds d(root)/d(root) = 1 (root must be scalar) and runs the chain rule
  // over every node in reverse creation order.
  void backward(Var root) {
    if (val(root).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    grad(root)[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && !n.grad.empty()) n.back(*this, Var{i});
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  size_t check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw std::out_of_range("tape: bad var");
    return static_cast<size_t>(v.id);
  }

  std::vector<Node> nodes_;
};

}  // namespace stf
