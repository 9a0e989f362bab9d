#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "logcan/ops.hpp"
#include "logcan/tensor.hpp"

// Define-by-run tape. Recording an op computes its value immediately and saves
// the inputs needed for backward; node order is therefore already topological.
// replay() re-executes every recorded op from the current leaf values through
// the identical code path, so a replayed terminal is bit-for-bit reproducible.

namespace logcan {

using NodeId = std::int64_t;

enum class OpKind {
  kLeaf,
  kMatmul,
  kLinear,
  kSoftmax,
  kConv2d,
  kUpsample,
  kPatchSplit,
  kPatchMerge,
  kRelu,
  kAddN,
  kMul,
  kScale,
  kConcatChannels,
  kTransposeLast2,
  kReshape,
  kRepeatBatch,
  kSumAll,
  kCrossEntropy,
};

template <class S>
class Tape {
 public:
  NodeId input(Tensor<S> value, bool requires_grad = false) {
    Node node;
    node.kind = OpKind::kLeaf;
    node.requires_grad = requires_grad;
    node.value = std::move(value);
    return push(std::move(node));
  }

  NodeId matmul(NodeId a, NodeId b) { return record(OpKind::kMatmul, {a, b}, {}); }

  NodeId linear(NodeId x, NodeId w, NodeId b) { return record(OpKind::kLinear, {x, w, b}, {}); }

  NodeId softmax(NodeId x, int axis) {
    Attrs at;
    at.axis = axis;
    return record(OpKind::kSoftmax, {x}, at);
  }

  NodeId conv(NodeId x, NodeId w, NodeId b, int stride = 1) {
    Attrs at;
    at.stride = stride;
    return record(OpKind::kConv2d, {x, w, b}, at);
  }

  NodeId upsample(NodeId x, int factor) {
    Attrs at;
    at.factor = factor;
    return record(OpKind::kUpsample, {x}, at);
  }

  NodeId split(NodeId x, Grid g) {
    Attrs at;
    at.grid = g;
    return record(OpKind::kPatchSplit, {x}, at);
  }

  NodeId merge(NodeId x, Grid g) {
    Attrs at;
    at.grid = g;
    return record(OpKind::kPatchMerge, {x}, at);
  }

  NodeId relu(NodeId x) { return record(OpKind::kRelu, {x}, {}); }

  NodeId add(NodeId a, NodeId b) { return record(OpKind::kAddN, {a, b}, {}); }

  NodeId add_n(const std::vector<NodeId>& xs) { return record(OpKind::kAddN, xs, {}); }

  NodeId mul(NodeId a, NodeId b) { return record(OpKind::kMul, {a, b}, {}); }

  NodeId scale(NodeId x, double alpha) {
    Attrs at;
    at.alpha = alpha;
    return record(OpKind::kScale, {x}, at);
  }

  NodeId concat_ch(NodeId a, NodeId b) { return record(OpKind::kConcatChannels, {a, b}, {}); }

  NodeId transpose_last2(NodeId x) { return record(OpKind::kTransposeLast2, {x}, {}); }

  NodeId reshape(NodeId x, std::vector<index_t> shape) {
    Attrs at;
    at.shape = std::move(shape);
    return record(OpKind::kReshape, {x}, at);
  }

  NodeId repeat_batch(NodeId x, int times) {
    Attrs at;
    at.times = times;
    return record(OpKind::kRepeatBatch, {x}, at);
  }

  NodeId sum_all(NodeId x) { return record(OpKind::kSumAll, {x}, {}); }

  NodeId cross_entropy(NodeId logits, std::shared_ptr<const std::vector<std::int32_t>> labels,
                       int ignore_index = kIgnoreIndex) {
    Attrs at;
    at.labels = std::move(labels);
    at.ignore_index = ignore_index;
    return record(OpKind::kCrossEntropy, {logits}, at);
  }

  const Tensor<S>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  S scalar(NodeId id) const {
    const Tensor<S>& v = value(id);
    if (v.numel() != 1)
      throw ShapeError("node value is not scalar, shape " + format_shape(v.shape));
    return v.data[0];
  }

  // Overwrite a leaf value in place (finite-difference probes); call replay()
  // afterwards to propagate.
  void set_leaf(NodeId id, Tensor<S> value) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.kind != OpKind::kLeaf) throw ShapeError("set_leaf on a non-leaf node");
    node.value = std::move(value);
  }

  Tensor<S>& leaf_value(NodeId id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.kind != OpKind::kLeaf) throw ShapeError("leaf_value on a non-leaf node");
    return node.value;
  }

  void replay() {
    for (Node& node : nodes_)
      if (node.kind != OpKind::kLeaf) node.value = eval(node);
  }

  // Reverse sweep from a scalar terminal. Returns one gradient per node id
  // (empty tensors where no gradient flows); each node is visited once, in
  // reverse recording order.
  std::vector<Tensor<S>> backward(NodeId root) const {
    const Node& terminal = nodes_[static_cast<std::size_t>(root)];
    if (terminal.value.numel() != 1)
      throw ShapeError("backward requires a scalar terminal, got shape " +
                       format_shape(terminal.value.shape));
    std::vector<Tensor<S>> grads(nodes_.size());
    grads[static_cast<std::size_t>(root)] = Tensor<S>::full(terminal.value.shape, S(1));
    for (NodeId id = root; id >= 0; --id) {
      const Node& node = nodes_[static_cast<std::size_t>(id)];
      Tensor<S>& gout = grads[static_cast<std::size_t>(id)];
      if (gout.empty() || !node.requires_grad || node.kind == OpKind::kLeaf) continue;
      propagate(node, gout, grads);
      if (id != root) gout = Tensor<S>();  // release interior gradients early
    }
    return grads;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Attrs {
    int axis = 0;
    int stride = 1;
    int factor = 2;
    int times = 1;
    double alpha = 1.0;
    Grid grid;
    std::vector<index_t> shape;
    std::shared_ptr<const std::vector<std::int32_t>> labels;
    int ignore_index = kIgnoreIndex;
  };

  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<NodeId> args;
    Attrs attrs;
    Tensor<S> value;
    bool requires_grad = false;
  };

  NodeId push(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  NodeId record(OpKind kind, std::vector<NodeId> args, Attrs attrs) {
    Node node;
    node.kind = kind;
    node.args = std::move(args);
    node.attrs = std::move(attrs);
    for (NodeId a : node.args)
      node.requires_grad |= nodes_[static_cast<std::size_t>(a)].requires_grad;
    node.value = eval(node);
    return push(std::move(node));
  }

  const Tensor<S>& arg(const Node& node, std::size_t i) const {
    return nodes_[static_cast<std::size_t>(node.args[i])].value;
  }

  Tensor<S> eval(const Node& node) const {
    switch (node.kind) {
      case OpKind::kLeaf:
        return node.value;
      case OpKind::kMatmul:
        return matmul_batched(arg(node, 0), arg(node, 1));
      case OpKind::kLinear:
        return logcan::linear(arg(node, 0), arg(node, 1), arg(node, 2));
      case OpKind::kSoftmax:
        return logcan::softmax(arg(node, 0), node.attrs.axis);
      case OpKind::kConv2d:
        return conv2d(arg(node, 0), arg(node, 1), arg(node, 2), node.attrs.stride);
      case OpKind::kUpsample:
        return upsample_bilinear(arg(node, 0), node.attrs.factor);
      case OpKind::kPatchSplit:
        return patch_split(arg(node, 0), node.attrs.grid);
      case OpKind::kPatchMerge:
        return patch_merge(arg(node, 0), node.attrs.grid);
      case OpKind::kRelu:
        return logcan::relu(arg(node, 0));
      case OpKind::kAddN: {
        std::vector<const Tensor<S>*> xs;
        xs.reserve(node.args.size());
        for (NodeId a : node.args) xs.push_back(&nodes_[static_cast<std::size_t>(a)].value);
        return add_n(xs);
      }
      case OpKind::kMul:
        return logcan::mul(arg(node, 0), arg(node, 1));
      case OpKind::kScale:
        return logcan::scale(arg(node, 0), node.attrs.alpha);
      case OpKind::kConcatChannels:
        return concat_channels(arg(node, 0), arg(node, 1));
      case OpKind::kTransposeLast2:
        return logcan::transpose_last2(arg(node, 0));
      case OpKind::kReshape:
        return logcan::reshape(arg(node, 0), node.attrs.shape);
      case OpKind::kRepeatBatch:
        return logcan::repeat_batch(arg(node, 0), node.attrs.times);
      case OpKind::kSumAll:
        return logcan::sum_all(arg(node, 0));
      case OpKind::kCrossEntropy: {
        Tensor<S> out({1});
        out.data[0] =
            static_cast<S>(cross_entropy_value(arg(node, 0), *node.attrs.labels, node.attrs.ignore_index));
        return out;
      }
    }
    throw ShapeError("unknown op kind");
  }

  Tensor<S>* grad_slot(NodeId id, std::vector<Tensor<S>>& grads) const {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad) return nullptr;
    Tensor<S>& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g = Tensor<S>(node.value.shape);
    return &g;
  }

  void propagate(const Node& node, const Tensor<S>& gout, std::vector<Tensor<S>>& grads) const {
    switch (node.kind) {
      case OpKind::kLeaf:
        return;
      case OpKind::kMatmul:
        matmul_batched_backward(arg(node, 0), arg(node, 1), gout, grad_slot(node.args[0], grads),
                                grad_slot(node.args[1], grads));
        return;
      case OpKind::kLinear:
        linear_backward(arg(node, 0), arg(node, 1), gout, grad_slot(node.args[0], grads),
                        grad_slot(node.args[1], grads), grad_slot(node.args[2], grads));
        return;
      case OpKind::kSoftmax:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads))
          softmax_backward(node.value, node.attrs.axis, gout, gx);
        return;
      case OpKind::kConv2d:
        conv2d_backward(arg(node, 0), arg(node, 1), node.attrs.stride, gout,
                        grad_slot(node.args[0], grads), grad_slot(node.args[1], grads),
                        grad_slot(node.args[2], grads));
        return;
      case OpKind::kUpsample:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads))
          upsample_bilinear_backward(arg(node, 0), node.attrs.factor, gout, gx);
        return;
      case OpKind::kPatchSplit:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads)) {
          Tensor<S> g = patch_merge(gout, node.attrs.grid);
          for (std::size_t i = 0; i < g.data.size(); ++i) gx->data[i] += g.data[i];
        }
        return;
      case OpKind::kPatchMerge:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads)) {
          Tensor<S> g = patch_split(gout, node.attrs.grid);
          for (std::size_t i = 0; i < g.data.size(); ++i) gx->data[i] += g.data[i];
        }
        return;
      case OpKind::kRelu:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads)) {
          const Tensor<S>& x = arg(node, 0);
          for (std::size_t i = 0; i < x.data.size(); ++i)
            if (x.data[i] > S(0)) gx->data[i] += gout.data[i];
        }
        return;
      case OpKind::kAddN:
        for (NodeId a : node.args)
          if (Tensor<S>* gx = grad_slot(a, grads))
            for (std::size_t i = 0; i < gout.data.size(); ++i) gx->data[i] += gout.data[i];
        return;
      case OpKind::kMul: {
        const Tensor<S>& a = arg(node, 0);
        const Tensor<S>& b = arg(node, 1);
        if (Tensor<S>* ga = grad_slot(node.args[0], grads))
          for (std::size_t i = 0; i < gout.data.size(); ++i) ga->data[i] += gout.data[i] * b.data[i];
        if (Tensor<S>* gb = grad_slot(node.args[1], grads))
          for (std::size_t i = 0; i < gout.data.size(); ++i) gb->data[i] += gout.data[i] * a.data[i];
        return;
      }
      case OpKind::kScale:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads))
          for (std::size_t i = 0; i < gout.data.size(); ++i)
            gx->data[i] += static_cast<S>(static_cast<double>(gout.data[i]) * node.attrs.alpha);
        return;
      case OpKind::kConcatChannels: {
        const Tensor<S>& a = arg(node, 0);
        const Tensor<S>& b = arg(node, 1);
        const index_t n = a.shape[0], ca = a.shape[1], cb = b.shape[1];
        const index_t plane = a.shape[2] * a.shape[3];
        if (Tensor<S>* ga = grad_slot(node.args[0], grads))
          for (index_t i = 0; i < n; ++i)
            for (index_t j = 0; j < ca * plane; ++j)
              ga->data[i * ca * plane + j] += gout.data[i * (ca + cb) * plane + j];
        if (Tensor<S>* gb = grad_slot(node.args[1], grads))
          for (index_t i = 0; i < n; ++i)
            for (index_t j = 0; j < cb * plane; ++j)
              gb->data[i * cb * plane + j] += gout.data[(i * (ca + cb) + ca) * plane + j];
        return;
      }
      case OpKind::kTransposeLast2:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads)) {
          Tensor<S> g = logcan::transpose_last2(gout);
          for (std::size_t i = 0; i < g.data.size(); ++i) gx->data[i] += g.data[i];
        }
        return;
      case OpKind::kReshape:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads))
          for (std::size_t i = 0; i < gout.data.size(); ++i) gx->data[i] += gout.data[i];
        return;
      case OpKind::kRepeatBatch:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads))
          repeat_batch_backward(arg(node, 0), node.attrs.times, gout, gx);
        return;
      case OpKind::kSumAll:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads))
          for (std::size_t i = 0; i < gx->data.size(); ++i) gx->data[i] += gout.data[0];
        return;
      case OpKind::kCrossEntropy:
        if (Tensor<S>* gx = grad_slot(node.args[0], grads))
          cross_entropy_backward(arg(node, 0), *node.attrs.labels, node.attrs.ignore_index,
                                 static_cast<double>(gout.data[0]), gx);
        return;
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace logcan
