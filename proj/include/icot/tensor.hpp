#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "icot/error.hpp"

namespace icot {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node in the reverse-mode graph. Values are f32, row-major.
// `grad` persists across backward calls (accumulates); `flow` is the
// per-pass gradient buffer owned by backward().
struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  std::vector<float> flow;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;
  int64_t id = 0;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float v, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<float> data,
                          bool requires_grad = false);
  // Gaussian init, one draw per element in row-major order.
  static Tensor randn(const Shape& shape, std::mt19937& rng, float stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }

  float* data() { return node_->value.data(); }
  const float* data() const { return node_->value.data(); }
  const std::vector<float>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer, zero-filled on first access.
  std::vector<float>& grad();
  const std::vector<float>& grad_ref() const { return node_->grad; }
  void zero_grad();

  // Scalar accessor; contract error unless numel() == 1.
  float item() const;

  // Copy of the values with no graph attached.
  Tensor detach() const;

  int64_t node_id() const { return node_->id; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Graph recording switch. Ops record parents/backprop only while enabled;
// generate loops run under a NoGradGuard so no graph is built.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Allocates a fresh node; requires_grad of non-leaf nodes is derived by ops.
NodePtr make_node(Shape shape, bool requires_grad);

// Reverse-mode sweep from a scalar loss. Every requires_grad tensor
// reachable from `loss` receives grad += d(loss)/d(tensor); repeated calls
// accumulate. Each node is visited exactly once per call.
void backward(const Tensor& loss);

}  // namespace icot
