#include "msn/autograd.hpp"

#include <memory>

namespace msn {

template <typename T>
Var Tape<T>::leaf(TensorT value, bool requires_grad, std::string name) {
  Node node;
  node.op = std::move(name);
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(std::string op, std::vector<Var> inputs, TensorT value, BackwardFn backward) {
  require_finite(value, "output of " + op);
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  for (Var in : inputs) {
    if (in.index >= nodes_.size()) throw std::out_of_range("tape: input refers to an unrecorded node");
    node.requires_grad = node.requires_grad || nodes_[in.index].requires_grad;
  }
  node.inputs = std::move(inputs);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
void Tape<T>::accumulate(Var v, const TensorT& g) {
  Node& node = nodes_.at(v.index);
  if (!node.requires_grad) return;
  require_same_shape(node.value.shape(), g.shape(), "gradient for '" + node.op + "'");
  if (node.grad.empty()) {
    node.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

template <typename T>
void Tape<T>::backward(const std::vector<std::pair<Var, TensorT>>& seeds) {
  for (Node& node : nodes_) node.grad = TensorT();
  visit_order_.clear();
  for (const auto& [root, g] : seeds) accumulate(root, g);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    visit_order_.push_back(i);
    // Inputs always precede the node, so grad is final here.
    node.backward(*this, node.grad);
  }
}

template class Tape<float>;
template class Tape<double>;

namespace ag {

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad) {
  auto out = ops::conv2d(tape.value(input), tape.value(kernel), tape.value(bias), stride, pad);
  return tape.record("conv2d", {input, kernel, bias}, std::move(out),
                     [=](Tape<T>& t, const BasicTensor<T>& g) {
                       auto grads = ops::conv2d_backward(t.value(input), t.value(kernel), g, stride, pad);
                       t.accumulate(input, grads.input);
                       t.accumulate(kernel, grads.kernel);
                       t.accumulate(bias, grads.bias);
                     });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  auto out = ops::relu(tape.value(input));
  return tape.record("relu", {input}, std::move(out), [=](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(input, ops::relu_backward(t.value(input), g));
  });
}

template <typename T>
Var max_pool2(Tape<T>& tape, Var input) {
  auto result = ops::max_pool2(tape.value(input));
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(std::move(result.argmax));
  return tape.record("max_pool2", {input}, std::move(result.output), [=](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(input, ops::max_pool2_backward(t.value(input).shape(), *argmax, g));
  });
}

template <typename T>
Var global_average_pool(Tape<T>& tape, Var input) {
  auto out = ops::global_average_pool(tape.value(input));
  return tape.record("global_average_pool", {input}, std::move(out), [=](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(input, ops::global_average_pool_backward(t.value(input).shape(), g));
  });
}

template <typename T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias) {
  auto out = ops::linear(tape.value(input), tape.value(weight), tape.value(bias));
  return tape.record("linear", {input, weight, bias}, std::move(out), [=](Tape<T>& t, const BasicTensor<T>& g) {
    auto grads = ops::linear_backward(t.value(input), t.value(weight), g);
    t.accumulate(input, grads.input);
    t.accumulate(weight, grads.weight);
    t.accumulate(bias, grads.bias);
  });
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta, BasicTensor<T>& running_mean,
               BasicTensor<T>& running_var, ops::Mode mode, const ops::BatchNormOptions& options) {
  auto result =
      ops::batch_norm(tape.value(input), tape.value(gamma), tape.value(beta), running_mean, running_var, mode, options);
  auto cache = std::make_shared<ops::BatchNormCache<T>>(std::move(result.cache));
  return tape.record("batch_norm", {input, gamma, beta}, std::move(result.output),
                     [=](Tape<T>& t, const BasicTensor<T>& g) {
                       auto grads = ops::batch_norm_backward(*cache, t.value(gamma), g);
                       t.accumulate(input, grads.input);
                       t.accumulate(gamma, grads.gamma);
                       t.accumulate(beta, grads.beta);
                     });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  auto out = ops::residual_add(tape.value(a), tape.value(b));
  return tape.record("add", {a, b}, std::move(out), [=](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

#define MSN_INSTANTIATE_AG(T)                                                                                   \
  template Var conv2d(Tape<T>&, Var, Var, Var, std::size_t, std::size_t);                                       \
  template Var relu(Tape<T>&, Var);                                                                             \
  template Var max_pool2(Tape<T>&, Var);                                                                        \
  template Var global_average_pool(Tape<T>&, Var);                                                              \
  template Var linear(Tape<T>&, Var, Var, Var);                                                                 \
  template Var batch_norm(Tape<T>&, Var, Var, Var, BasicTensor<T>&, BasicTensor<T>&, ops::Mode,                 \
                          const ops::BatchNormOptions&);                                                        \
  template Var add(Tape<T>&, Var, Var);

MSN_INSTANTIATE_AG(float)
MSN_INSTANTIATE_AG(double)

#undef MSN_INSTANTIATE_AG

}  // namespace ag
}  // namespace msn
