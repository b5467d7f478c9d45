#include "icot/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>

namespace icot {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {
std::atomic<int64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

NodePtr make_node(Shape shape, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value.assign(static_cast<size_t>(shape_numel(node->shape)), 0.f);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_node(shape, requires_grad));
}

Tensor Tensor::full(const Shape& shape, float v, bool requires_grad) {
  auto node = make_node(shape, requires_grad);
  std::fill(node->value.begin(), node->value.end(), v);
  return Tensor(node);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
  auto node = make_node(shape, requires_grad);
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  node->value = std::move(data);
  return Tensor(node);
}

Tensor Tensor::randn(const Shape& shape, std::mt19937& rng, float stddev, bool requires_grad) {
  auto node = make_node(shape, requires_grad);
  std::normal_distribution<float> nd(0.f, stddev);
  for (auto& v : node->value) v = nd(rng);
  return Tensor(node);
}

std::vector<float>& Tensor::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.f);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.f);
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

Tensor Tensor::detach() const {
  auto node = make_node(node_->shape, false);
  node->value = node_->value;
  return Tensor(node);
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
  }

  // Iterative post-order DFS; each node enters the topo list exactly once.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  TensorNode* root = loss.node().get();
  if (visited.insert(root).second) stack.push_back({root, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : topo) n->flow.assign(n->value.size(), 0.f);
  root->flow[0] = 1.f;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && n->requires_grad) n->backprop(*n);
  }

  for (TensorNode* n : topo) {
    if (n->requires_grad) {
      if (n->grad.empty()) n->grad.assign(n->value.size(), 0.f);
      for (size_t i = 0; i < n->flow.size(); ++i) n->grad[i] += n->flow[i];
    }
    n->flow.clear();
    n->flow.shrink_to_fit();
  }
}

}  // namespace icot
