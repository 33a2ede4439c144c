#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fpq {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;         // null for leaves
  std::shared_ptr<TensorImpl> grad;      // accumulated gradient (leaves only)
};

// Dense row-major float32 tensor with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage. Values produced by
// operators are never modified afterwards; only leaves (parameters) are
// updated in place by the optimizer, outside of any recorded graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, float value);
  // Throws ShapeError if values.size() does not match the shape and
  // NonFiniteError if any value is NaN or Inf.
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor scalar(float value);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const float> data() const;
  // In-place access for parameter updates and data loading.
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  // Gradient accumulated by backward(); undefined until the first backward.
  Tensor grad() const;
  void zero_grad();

  // New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

// One recorded operation. `inputs` are the operands; `backward` maps the
// gradient of the output to one gradient per input (undefined when an input
// does not need one).
struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

// Gradient recording is on by default. Disabling it makes every operator
// return untracked tensors.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the result of an operator and records it on the tape when gradients
// are enabled and at least one input requires them.
Tensor make_result(const char* op, Shape shape, std::vector<float> values,
                   std::vector<Tensor> inputs, BackwardFn backward);

// Reverse-mode sweep from a scalar `loss`, accumulating into the .grad of
// every reachable leaf that requires gradients. With create_graph the
// accumulated gradients are themselves differentiable.
void backward(const Tensor& loss, bool create_graph = false);

// Gradients of a scalar `output` with respect to `inputs`, without touching
// any .grad buffer. Unreached inputs receive zeros.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph = false);

}  // namespace fpq
