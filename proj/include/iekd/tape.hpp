#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "iekd/error.hpp"
#include "iekd/tensor.hpp"

namespace iekd {

using NodeId = std::int32_t;

/// Dynamically built computation tape. Nodes are appended in evaluation order,
/// so every node's inputs have smaller ids and a single reverse sweep in
/// strictly decreasing id order is a valid topological backward pass.
///
/// Ownership: node values live on the tape; bound parameters stay outside and
/// receive accumulated gradients (+=) at the end of each backward call.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  /// Leaf holding a value with no gradient tracking (data, frozen features).
  NodeId constant(Tensor value);

  /// Leaf bound to an external parameter; backward accumulates into p.grad.
  NodeId param(Tensor& p);

  /// Interior node produced by an op. `backward` receives the tape and this
  /// node's id; it must add contributions into the adjoints of its inputs.
  NodeId emplace(Tensor value, std::function<void(Tape&, NodeId)> backward);

  const Tensor& val(NodeId id) const { return nodes_[check(id)].value; }
  Tensor& mutable_val(NodeId id) { return nodes_[check(id)].value; }

  /// Adjoint buffer of a node; valid during and after backward().
  std::vector<double>& adj(NodeId id) { return nodes_[check(id)].adj; }
  const std::vector<double>& adj(NodeId id) const { return nodes_[check(id)].adj; }

  /// Reverse sweep from a scalar loss. Adjoints are recomputed from scratch on
  /// every call while parameter grads accumulate across calls.
  void backward(NodeId loss);

  void clear();
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> adj;
    std::function<void(Tape&, NodeId)> backward;
    Tensor* bound = nullptr;
  };

  std::size_t check(NodeId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(), ErrorKind::IndexOutOfRange,
            "node id not on the active tape");
    return static_cast<std::size_t>(id);
  }

  // deque: node references returned by val()/adj() stay valid while ops append
  std::deque<Node> nodes_;
  bool recording_;
};

}  // namespace iekd
