#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "msn/ops.hpp"
#include "msn/tensor.hpp"

namespace msn {

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t index = static_cast<std::size_t>(-1);
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so the tape itself is a topological
/// order; backward() walks it once from the end. A tape belongs to one forward
/// pass and is not shared between threads.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  /// Receives the node's accumulated output gradient and pushes contributions
  /// to its inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const TensorT& grad_output)>;

  struct Node {
    std::string op;
    std::vector<Var> inputs;
    TensorT value;
    TensorT grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  /// A graph input. Gradients are kept only when requires_grad is set.
  Var leaf(TensorT value, bool requires_grad = false, std::string name = "leaf");

  Var record(std::string op, std::vector<Var> inputs, TensorT value, BackwardFn backward);

  const TensorT& value(Var v) const { return nodes_.at(v.index).value; }
  /// Accumulated gradient; empty until backward() reaches the node.
  const TensorT& grad(Var v) const { return nodes_.at(v.index).grad; }
  const Node& node(Var v) const { return nodes_.at(v.index); }
  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(Var v, const TensorT& g);

  /// Seeds each (root, gradient) pair and propagates to every leaf that
  /// requires a gradient. Each node's backward runs at most once.
  void backward(const std::vector<std::pair<Var, TensorT>>& seeds);

  /// Reverse nodes visited by the last backward() call, in visit order.
  const std::vector<std::size_t>& visit_order() const { return visit_order_; }

 private:
  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
};

namespace ag {

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad);

template <typename T>
Var relu(Tape<T>& tape, Var input);

template <typename T>
Var max_pool2(Tape<T>& tape, Var input);

template <typename T>
Var global_average_pool(Tape<T>& tape, Var input);

template <typename T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias);

/// Running statistics are updated in place in train mode.
template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, BasicTensor<T>& running_mean,
               BasicTensor<T>& running_var, ops::Mode mode, const ops::BatchNormOptions& options = {});

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

}  // namespace ag
}  // namespace msn
