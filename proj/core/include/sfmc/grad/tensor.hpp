// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle to shared storage. Leaves created with
// `requires_grad` accumulate gradients when `backward()` runs on a scalar
// computed from them. Non-leaf tensors carry a Node that records the op tag,
// the inputs, and a closure holding whatever the op saved from its forward
// pass.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sfmc::grad {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
struct Node;

/// Receives the output gradient and one pointer per input; a pointer is null
/// when that input does not require a gradient. Implementations accumulate
/// (+=) into the non-null buffers.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

struct Node {
  std::uint64_t id = 0;
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves and constants
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);
  /// Leaf that accumulates gradients.
  static Tensor parameter(const Shape& shape, std::vector<double> values);

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::size_t rank() const { return shape().size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const;
  [[nodiscard]] std::size_t numel() const;

  [[nodiscard]] std::span<const double> values() const;
  /// Mutable access to storage. Only meaningful for leaves (e.g. optimizer
  /// updates); mutating a tensor that a live graph saved is undefined.
  [[nodiscard]] std::span<double> mutable_values();
  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::initializer_list<std::size_t> index) const;

  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] bool has_node() const;
  [[nodiscard]] const std::string& op() const;
  [[nodiscard]] bool has_grad() const;
  /// Gradient buffer; zeros of the right shape if nothing was accumulated.
  [[nodiscard]] std::vector<double> grad() const;
  void zero_grad();

  /// Shares nothing with the graph: a constant copy of the values.
  [[nodiscard]] Tensor detach() const;
  [[nodiscard]] Tensor clone() const;

  [[nodiscard]] const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Creates the result of an op. When no input requires a gradient (or a
/// NoGradGuard is active) the result is a constant and `fn` is dropped.
Tensor make_result(std::string op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn fn);

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
void backward(const Tensor& loss);

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace sfmc::grad
