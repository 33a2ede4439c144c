#pragma once

#include <cstdint>
#include <vector>

#include "fpq/tensor.hpp"

// Differentiable operators. Every backward rule is written in terms of these
// same operators, so gradients can be differentiated again (Hessian-vector
// products run through the regular tape).
//
// There is no general broadcasting. Per-axis operations take the axis they
// act on explicitly, and elementwise binaries require identical shapes.

namespace fpq {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, float factor);
Tensor add_scalar(const Tensor& x, float value);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor reciprocal(const Tensor& x);
// Subgradient at 0 is 0.
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// log(1 + e^x); the smooth stand-in for relu.
Tensor softplus(const Tensor& x);

// x times a one-element tensor.
Tensor mul_scalar(const Tensor& x, const Tensor& s);

Tensor reshape(const Tensor& x, Shape shape);

// Sum / mean of every element; result has shape {1}.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Sum over every axis except `axis`; result has shape {x.dim(axis)}.
Tensor sum_keep(const Tensor& x, std::size_t axis);
// Inverse layout of sum_keep: replicate v (shape {shape[axis]}) across the
// other axes of `shape`.
Tensor broadcast_along(const Tensor& v, const Shape& shape, std::size_t axis);

// (N, C, spatial...) -> (N, C) sum over the trailing spatial axes.
Tensor spatial_sum(const Tensor& x);
// (N, C) -> `shape` replicated over the trailing spatial axes.
Tensor spatial_expand(const Tensor& v, const Shape& shape);
Tensor global_avg_pool(const Tensor& x);

// op(A) * op(B) for 2-D operands, op = transpose when the flag is set.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);
Tensor transpose(const Tensor& x);

// x (B, in) * w(out, in)^T + b(out). `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Per-channel scale-shift on axis 1: y[n, c, ...] = gamma[c] * x[n, c, ...] + beta[c].
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);

struct ConvGeometry {
  std::int64_t kernel = 3;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
};

// (N, C, H, W) -> (N*OH*OW, C*k*k) patch matrix.
Tensor im2col(const Tensor& x, const ConvGeometry& geom);
// Adjoint of im2col: scatters patches back onto an image of `image_shape`.
Tensor col2im(const Tensor& cols, const Shape& image_shape, const ConvGeometry& geom);
// (N*OH*OW, C) rows -> (N, C, OH, OW) and back.
Tensor rows_to_nchw(const Tensor& rows, std::int64_t n, std::int64_t oh, std::int64_t ow);
Tensor nchw_to_rows(const Tensor& x);

// x (N, C, H, W), w (O, C, k, k). Patch extraction followed by one matmul.
Tensor conv2d(const Tensor& x, const Tensor& w, const ConvGeometry& geom);

std::int64_t conv_out_extent(std::int64_t in, const ConvGeometry& geom);

// Row-wise softmax of (B, K) logits.
Tensor softmax(const Tensor& logits);
// Mean over the batch of -log softmax(logits)[label]. Labels must lie in [0, K).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels);

// Generic entry point naming the operator by string, mostly for tooling and
// the Python bindings. Kinds: matmul, conv2d, add, relu, mean, variance,
// affine, softmax_ce, square, sqrt.
struct OpArgs {
  ConvGeometry conv;
  std::vector<std::int32_t> labels;
};
Tensor forward_op(const std::string& kind, const std::vector<Tensor>& inputs,
                  const OpArgs& args = {});

// Population variance of every element; result has shape {1}.
Tensor variance(const Tensor& x);

}  // namespace fpq
