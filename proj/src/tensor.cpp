#include "fpq/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "fpq/error.hpp"
#include "fpq/ops.hpp"

namespace fpq {

namespace {

thread_local bool g_grad_enabled = true;

#if defined(__GLIBC__)
// Activation buffers are large and short-lived. With glibc defaults each one
// becomes a fresh mmap, so every op pays for page faults on zeroed pages.
// Keeping them on the heap lets freed blocks be reused.
[[maybe_unused]] const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<float> values) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return impl;
}

void require_finite(const char* op, std::span<const float> values) {
  // Branch-free exponent scan first so the common all-finite case vectorizes.
  std::uint32_t special = 0;
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    special |= static_cast<std::uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
  }
  if (!special) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream msg;
      msg << op << ": non-finite value " << values[i] << " at flat index " << i;
      throw NonFiniteError(msg.str());
    }
  }
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0f); }

Tensor Tensor::full(Shape shape, float value) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("Tensor: extents must be positive, got " + shape_str(shape));
  }
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(new_impl(std::move(shape), std::vector<float>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("Tensor: extents must be positive, got " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("Tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                     shape_str(shape));
  }
  require_finite("Tensor::from", values);
  return Tensor(new_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("Tensor::dim: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() { return impl_->data; }
std::vector<float> Tensor::to_vector() const { return impl_->data; }

float Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("Tensor::item: expected one element, shape is " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn && !on) throw Error("set_requires_grad(false) on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_->grad_fn; }

Tensor Tensor::grad() const { return Tensor(impl_->grad); }

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const { return Tensor(new_impl(impl_->shape, impl_->data)); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(const char* op, Shape shape, std::vector<float> values,
                   std::vector<Tensor> inputs, BackwardFn backward_fn) {
  require_finite(op, values);
  auto impl = new_impl(std::move(shape), std::move(values));
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      auto node = std::make_shared<Node>();
      node->op = op;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward_fn);
      impl->grad_fn = std::move(node);
      impl->requires_grad = true;
    }
  }
  return Tensor(std::move(impl));
}

namespace {

// Reverse topological order (outputs first) of every tensor on a path from
// `root` back to a leaf that requires gradients.
std::vector<TensorImpl*> reverse_topological(TensorImpl* root) {
  std::vector<TensorImpl*> post;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const Node* node = impl->grad_fn.get();
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].impl();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    post.push_back(impl);
    stack.pop_back();
  }
  return {post.rbegin(), post.rend()};
}

std::unordered_map<TensorImpl*, Tensor> run_backward(const Tensor& output, bool create_graph) {
  if (output.numel() != 1) {
    throw Error("backward: loss must be a scalar, got shape " + shape_str(output.shape()));
  }
  if (!output.requires_grad()) {
    throw Error("backward: loss does not depend on any tensor that requires gradients");
  }
  std::unique_ptr<NoGradGuard> no_grad;
  std::unique_ptr<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad = std::make_unique<EnableGradGuard>();
  } else {
    no_grad = std::make_unique<NoGradGuard>();
  }

  std::unordered_map<TensorImpl*, Tensor> grads;
  grads.emplace(output.impl(), Tensor::ones(output.shape()));
  for (TensorImpl* impl : reverse_topological(output.impl())) {
    if (!impl->grad_fn) continue;
    auto it = grads.find(impl);
    if (it == grads.end()) continue;
    Tensor upstream = it->second;
    const Node& node = *impl->grad_fn;
    std::vector<Tensor> input_grads = node.backward(upstream);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const Tensor& in = node.inputs[i];
      if (!in.requires_grad() || i >= input_grads.size() || !input_grads[i].defined()) continue;
      if (input_grads[i].shape() != in.shape()) {
        throw ShapeError(node.op + " backward: gradient shape " +
                         shape_str(input_grads[i].shape()) + " does not match input shape " +
                         shape_str(in.shape()));
      }
      auto [slot, inserted] = grads.try_emplace(in.impl(), input_grads[i]);
      if (!inserted) slot->second = add(slot->second, input_grads[i]);
    }
  }
  return grads;
}

}  // namespace

void backward(const Tensor& loss, bool create_graph) {
  auto grads = run_backward(loss, create_graph);
  for (auto& [impl, g] : grads) {
    if (impl->grad_fn || !impl->requires_grad) continue;
    Tensor contribution = create_graph ? g : g.detach();
    if (impl->grad) {
      std::unique_ptr<NoGradGuard> guard;
      if (!create_graph) guard = std::make_unique<NoGradGuard>();
      contribution = add(Tensor(impl->grad), contribution);
    }
    impl->grad = contribution.impl_ptr();
  }
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph) {
  auto grads = run_backward(output, create_graph);
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.impl());
    result.push_back(it != grads.end() ? it->second : Tensor::zeros(in.shape()));
  }
  return result;
}

}  // namespace fpq
