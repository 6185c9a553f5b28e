#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vqct/ops.hpp"
#include "vqct/tensor.hpp"

namespace vqct {

using NodeId = std::size_t;

// Tape-based reverse-mode graph. Nodes are appended in evaluation order, so
// the append order is already a topological order; backward walks it in
// reverse and accumulates into each node's gradient slot.
class Graph {
 public:
  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::size_t stride = 1, pad = 0;  // conv nodes only
    // Receives the node's accumulated gradient; pushes into inputs.
    std::function<void(Graph&, const Tensor&)> backward;
  };

  NodeId constant(Tensor value) { return push("constant", {}, std::move(value), false, nullptr); }

  NodeId parameter(Tensor value) { return push("parameter", {}, std::move(value), true, nullptr); }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const Tensor& grad(NodeId id) const { return nodes_.at(id).grad; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  NodeId conv(NodeId x, NodeId kernel, std::optional<NodeId> bias, std::size_t stride, std::size_t pad) {
    const Tensor* b = bias ? &value(*bias) : nullptr;
    Tensor out = conv_forward(value(x), value(kernel), b, stride, pad);
    std::vector<NodeId> ins{x, kernel};
    if (bias) ins.push_back(*bias);
    const NodeId id = push("conv", ins, std::move(out), any_requires(ins),
                [x, kernel, bias, stride, pad](Graph& g, const Tensor& up) {
                  const bool need_x = g.nodes_[x].requires_grad;
                  auto grads = conv_backward(g.value(x), g.value(kernel), stride, pad, up, need_x);
                  if (need_x) g.accumulate(x, grads.input);
                  g.accumulate(kernel, grads.kernel);
                  if (bias) g.accumulate(*bias, grads.bias);
                });
    nodes_[id].stride = stride;
    nodes_[id].pad = pad;
    return id;
  }

  // Gradients of a recorded conv node for an arbitrary upstream gradient.
  ConvGrads conv_grads(NodeId id, const Tensor& upstream) const {
    const Node& n = nodes_.at(id);
    if (n.op != "conv") throw DomainError("node " + std::to_string(id) + " is not a conv record");
    return conv_backward(value(n.inputs[0]), value(n.inputs[1]), n.stride, n.pad, upstream);
  }

  NodeId leaky_relu(NodeId x, double slope) {
    return push("leaky_relu", {x}, leaky_relu_forward(value(x), slope), any_requires({x}),
                [x, slope](Graph& g, const Tensor& up) {
                  g.accumulate(x, leaky_relu_backward(g.value(x), slope, up));
                });
  }

  NodeId upsample(NodeId x, std::size_t factor) {
    return push("upsample", {x}, upsample_nearest_forward(value(x), factor), any_requires({x}),
                [x, factor](Graph& g, const Tensor& up) {
                  g.accumulate(x, upsample_nearest_backward(g.value(x).shape(), factor, up));
                });
  }

  NodeId add(NodeId a, NodeId b) {
    Tensor out = value(a);
    out += value(b);
    return push("add", {a, b}, std::move(out), any_requires({a, b}), [a, b](Graph& g, const Tensor& up) {
      g.accumulate(a, up);
      g.accumulate(b, up);
    });
  }

  NodeId scale(NodeId x, double s) {
    Tensor out = value(x);
    out *= s;
    return push("scale", {x}, std::move(out), any_requires({x}), [x, s](Graph& g, const Tensor& up) {
      Tensor t = up;
      t *= s;
      g.accumulate(x, t);
    });
  }

  NodeId sum(NodeId x) {
    double s = 0.0;
    for (double v : value(x).values()) s += v;
    return push("sum", {x}, Tensor::scalar(s), any_requires({x}), [x](Graph& g, const Tensor& up) {
      g.accumulate(x, Tensor(g.value(x).shape(), up.item()));
    });
  }

  NodeId mean(NodeId x) { return scale(sum(x), 1.0 / static_cast<double>(value(x).size())); }

  // mean |pred - target|; the subgradient at equality is 0.
  NodeId l1_loss(NodeId pred, const Tensor& target) {
    const Tensor& p = value(pred);
    require_same_shape(p, target, "l1_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - target[i]);
    const double n = static_cast<double>(p.size());
    return push("l1_loss", {pred}, Tensor::scalar(s / n), any_requires({pred}),
                [pred, target, n](Graph& g, const Tensor& up) {
                  const Tensor& pv = g.value(pred);
                  Tensor t(pv.shape());
                  const double k = up.item() / n;
                  for (std::size_t i = 0; i < t.size(); ++i) {
                    const double d = pv[i] - target[i];
                    t[i] = d > 0.0 ? k : (d < 0.0 ? -k : 0.0);
                  }
                  g.accumulate(pred, t);
                });
  }

  NodeId mse_loss(NodeId pred, const Tensor& target) {
    const Tensor& p = value(pred);
    require_same_shape(p, target, "mse_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - target[i]) * (p[i] - target[i]);
    const double n = static_cast<double>(p.size());
    return push("mse_loss", {pred}, Tensor::scalar(s / n), any_requires({pred}),
                [pred, target, n](Graph& g, const Tensor& up) {
                  const Tensor& pv = g.value(pred);
                  Tensor t(pv.shape());
                  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 2.0 * (pv[i] - target[i]) / n * up.item();
                  g.accumulate(pred, t);
                });
  }

  NodeId l2_normalize(NodeId x) {
    auto fwd = std::make_shared<ChannelNormResult>(l2_normalize_channels(value(x)));
    Tensor out = fwd->output;
    return push("l2_normalize", {x}, std::move(out), any_requires({x}), [x, fwd](Graph& g, const Tensor& up) {
      g.accumulate(x, l2_normalize_channels_backward(*fwd, up));
    });
  }

  // Forward value is `quantized`; the Jacobian w.r.t. x is the identity.
  NodeId straight_through(NodeId x, Tensor quantized) {
    require_same_shape(value(x), quantized, "straight_through");
    return push("straight_through", {x}, std::move(quantized), any_requires({x}),
                [x](Graph& g, const Tensor& up) { g.accumulate(x, up); });
  }

  // beta * mean over positions of ||x_p - q_p||^2, with q held constant.
  NodeId commitment(NodeId x, const Tensor& quantized, double beta) {
    const Tensor& xv = value(x);
    require_same_shape(xv, quantized, "commitment");
    const double positions = static_cast<double>(xv.size() / xv.dim(0));
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) s += (xv[i] - quantized[i]) * (xv[i] - quantized[i]);
    return push("commitment", {x}, Tensor::scalar(beta * s / positions), any_requires({x}),
                [x, quantized, beta, positions](Graph& g, const Tensor& up) {
                  const Tensor& v = g.value(x);
                  Tensor t(v.shape());
                  const double k = 2.0 * beta / positions * up.item();
                  for (std::size_t i = 0; i < t.size(); ++i) t[i] = k * (v[i] - quantized[i]);
                  g.accumulate(x, t);
                });
  }

  // Reverse accumulation from a scalar loss. Every node's grad slot is reset
  // first, so unreachable parameters end with zero gradient.
  void backward(NodeId loss) {
    if (nodes_.at(loss).value.size() != 1) throw DomainError("backward requires a scalar loss node");
    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[loss].grad = Tensor(nodes_[loss].value.shape(), 1.0);
    for (std::size_t i = loss + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    for (auto& n : nodes_)
      if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  }

 private:
  NodeId push(std::string op, std::vector<NodeId> inputs, Tensor value, bool requires_grad,
              std::function<void(Graph&, const Tensor&)> backward) {
    Node n;
    n.op = std::move(op);
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  bool any_requires(std::initializer_list<NodeId> ids) const {
    for (auto id : ids)
      if (nodes_.at(id).requires_grad) return true;
    return false;
  }
  bool any_requires(const std::vector<NodeId>& ids) const {
    for (auto id : ids)
      if (nodes_.at(id).requires_grad) return true;
    return false;
  }

  void accumulate(NodeId id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = g;
    else
      n.grad += g;
  }

  std::vector<Node> nodes_;
};

}  // namespace vqct
