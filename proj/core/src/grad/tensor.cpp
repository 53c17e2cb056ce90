// SPDX-License-Identifier: Apache-2.0
#include "sfmc/grad/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "sfmc/error.hpp"

namespace sfmc::grad {

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_next_node_id{1};

const std::string kLeafOp = "leaf";

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return from(shape, std::vector<double>(numel_of(shape), value));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  if (numel_of(shape) != values.size()) {
    throw Error(ErrorCode::kShapeMismatch, "shape " + shape_str(shape) + " holds " +
                                               std::to_string(numel_of(shape)) +
                                               " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->values = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(const Shape& shape, std::vector<double> values) {
  Tensor t = from(shape, std::move(values));
  t.impl_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "axis " + std::to_string(axis) + " out of range for " + shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->values.size(); }

std::span<const double> Tensor::values() const { return impl_->values; }

std::span<double> Tensor::mutable_values() { return impl_->values; }

double Tensor::item() const {
  if (impl_->values.size() != 1) {
    throw Error(ErrorCode::kShapeMismatch, "item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = impl_->shape;
  if (index.size() != s.size()) {
    throw Error(ErrorCode::kShapeMismatch, "index rank mismatch for " + shape_str(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->values.at(flat);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

bool Tensor::has_node() const { return impl_ && impl_->node != nullptr; }

const std::string& Tensor::op() const { return impl_->node ? impl_->node->op : kLeafOp; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->values.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return from(impl_->shape, impl_->values); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad && !impl_->node;
  return t;
}

Tensor make_result(std::string op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn fn) {
  Tensor out = Tensor::from(shape, std::move(values));
  if (!t_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->id = g_next_node_id.fetch_add(1);
  node->op = std::move(op);
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.has_node()) {
    throw Error(ErrorCode::kBackwardOnDetached, "loss has no graph node");
  }
  if (loss.numel() != 1) {
    throw Error(ErrorCode::kShapeMismatch,
                "backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      TensorImpl* child = impl->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  for (TensorImpl* impl : order) {
    if (impl->node) impl->grad.assign(impl->values.size(), 0.0);
  }
  loss.impl()->grad.assign(1, 1.0);

  std::vector<double*> sinks;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (!impl->node) continue;
    const Node& node = *impl->node;
    sinks.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      TensorImpl* in = node.inputs[i].get();
      if (!in->requires_grad) continue;
      if (in->grad.empty()) in->grad.assign(in->values.size(), 0.0);
      sinks[i] = in->grad.data();
    }
    node.backward(impl->grad, sinks);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

}  // namespace sfmc::grad
