#include "iekd/tape.hpp"

#include <algorithm>

namespace iekd {

NodeId Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr});
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::param(Tensor& p) {
  p.ensure_grad();
  nodes_.push_back(Node{p, {}, nullptr, &p});
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::emplace(Tensor value, std::function<void(Tape&, NodeId)> backward) {
  nodes_.push_back(Node{std::move(value), {}, recording_ ? std::move(backward) : nullptr, nullptr});
  return static_cast<NodeId>(nodes_.size() - 1);
}

static bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

void Tape::backward(NodeId loss) {
  const std::size_t root = check(loss);
  require(nodes_[root].value.is_scalar(), ErrorKind::NonScalarLoss,
          "backward requires a scalar loss, got " + shape_str(nodes_[root].value.shape));

  for (std::size_t i = 0; i <= root; ++i)
    nodes_[i].adj.assign(nodes_[i].value.data.size(), 0.0);
  nodes_[root].adj[0] = 1.0;

  for (std::size_t i = root + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.adj.empty() || all_zero(node.adj)) continue;
    if (node.backward) node.backward(*this, static_cast<NodeId>(i));
    if (node.bound) {
      node.bound->ensure_grad();
      for (std::size_t j = 0; j < node.adj.size(); ++j) node.bound->grad[j] += node.adj[j];
    }
  }
}

void Tape::clear() { nodes_.clear(); }

}  // namespace iekd
