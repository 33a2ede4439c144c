#include "fpq/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "fpq/error.hpp"

namespace fpq {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_ndim(const char* op, const Tensor& x, std::size_t ndim) {
  if (x.ndim() != ndim) {
    throw ShapeError(std::string(op) + ": expected a " + std::to_string(ndim) +
                     "-D tensor, got shape " + shape_str(x.shape()));
  }
}

template <typename F>
std::vector<float> map_values(const Tensor& x, F f) {
  auto in = x.data();
  std::vector<float> out(in.size());
  std::transform(in.begin(), in.end(), out.begin(), f);
  return out;
}

template <typename F>
std::vector<float> zip_values(const Tensor& a, const Tensor& b, F f) {
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  std::transform(x.begin(), x.end(), y.begin(), out.begin(), f);
  return out;
}

// Splits a shape around `axis` into (outer, extent, inner) blocks.
struct AxisLayout {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisLayout layout_of(const Shape& shape, std::size_t axis) {
  AxisLayout l;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i < axis) l.outer *= shape[i];
    else if (i == axis) l.extent = shape[i];
    else l.inner *= shape[i];
  }
  return l;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return make_result("add", a.shape(), zip_values(a, b, std::plus<>{}), {a, b},
                     [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return make_result("sub", a.shape(), zip_values(a, b, std::minus<>{}), {a, b},
                     [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return make_result("mul", a.shape(), zip_values(a, b, std::multiplies<>{}), {a, b},
                     [a, b](const Tensor& g) { return std::vector<Tensor>{mul(g, b), mul(g, a)}; });
}

Tensor neg(const Tensor& x) {
  return make_result("neg", x.shape(), map_values(x, std::negate<>{}), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& x, float factor) {
  return make_result("scale", x.shape(), map_values(x, [factor](float v) { return v * factor; }),
                     {x}, [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& x, float value) {
  return make_result("add_scalar", x.shape(),
                     map_values(x, [value](float v) { return v + value; }), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor square(const Tensor& x) {
  return make_result("square", x.shape(), map_values(x, [](float v) { return v * v; }), {x},
                     [x](const Tensor& g) { return std::vector<Tensor>{scale(mul(g, x), 2.0f)}; });
}

Tensor sqrt(const Tensor& x) {
  for (float v : x.data()) {
    if (v < 0.0f) throw Error("sqrt: negative input " + std::to_string(v));
  }
  return make_result("sqrt", x.shape(), map_values(x, [](float v) { return std::sqrt(v); }), {x},
                     [x](const Tensor& g) {
                       return std::vector<Tensor>{mul(g, scale(reciprocal(sqrt(x)), 0.5f))};
                     });
}

Tensor reciprocal(const Tensor& x) {
  return make_result("reciprocal", x.shape(), map_values(x, [](float v) { return 1.0f / v; }), {x},
                     [x](const Tensor& g) {
                       return std::vector<Tensor>{neg(mul(g, square(reciprocal(x))))};
                     });
}

Tensor relu(const Tensor& x) {
  return make_result("relu", x.shape(), map_values(x, [](float v) { return v > 0.0f ? v : 0.0f; }),
                     {x}, [x](const Tensor& g) {
                       Tensor mask =
                           Tensor::from(x.shape(), map_values(x, [](float v) { return v > 0.0f ? 1.0f : 0.0f; }));
                       return std::vector<Tensor>{mul(g, mask)};
                     });
}

Tensor tanh(const Tensor& x) {
  return make_result("tanh", x.shape(), map_values(x, [](float v) { return std::tanh(v); }), {x},
                     [x](const Tensor& g) {
                       return std::vector<Tensor>{mul(g, add_scalar(neg(square(tanh(x))), 1.0f))};
                     });
}

Tensor sigmoid(const Tensor& x) {
  auto f = [](float v) {
    return v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
  };
  return make_result("sigmoid", x.shape(), map_values(x, f), {x}, [x](const Tensor& g) {
    Tensor s = sigmoid(x);
    return std::vector<Tensor>{mul(g, mul(s, add_scalar(neg(s), 1.0f)))};
  });
}

Tensor softplus(const Tensor& x) {
  auto f = [](float v) { return std::log1p(std::exp(-std::fabs(v))) + std::max(v, 0.0f); };
  return make_result("softplus", x.shape(), map_values(x, f), {x},
                     [x](const Tensor& g) { return std::vector<Tensor>{mul(g, sigmoid(x))}; });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("mul_scalar: expected a one-element factor, got " + shape_str(s.shape()));
  }
  float factor = s.item();
  return make_result("mul_scalar", x.shape(), map_values(x, [factor](float v) { return v * factor; }),
                     {x, s}, [x, s](const Tensor& g) {
                       Tensor gs = reshape(sum(mul(g, x)), s.shape());
                       return std::vector<Tensor>{mul_scalar(g, s), gs};
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Shape original = x.shape();
  return make_result("reshape", std::move(shape), x.to_vector(), {x},
                     [original](const Tensor& g) { return std::vector<Tensor>{reshape(g, original)}; });
}

Tensor sum(const Tensor& x) {
  // Independent partial sums keep the double accumulation off one dependency chain.
  auto in = x.data();
  double part[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= in.size(); i += 8) {
    for (std::size_t k = 0; k < 8; ++k) part[k] += in[i + k];
  }
  for (; i < in.size(); ++i) part[0] += in[i];
  double total = 0.0;
  for (double v : part) total += v;
  Shape shape = x.shape();
  return make_result("sum", {1}, {static_cast<float>(total)}, {x}, [shape](const Tensor& g) {
    return std::vector<Tensor>{mul_scalar(Tensor::ones(shape), g)};
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor variance(const Tensor& x) {
  Tensor m = mean(x);
  Tensor centered = sub(x, mul_scalar(Tensor::ones(x.shape()), m));
  return mean(square(centered));
}

Tensor sum_keep(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) {
    throw ShapeError("sum_keep: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  AxisLayout l = layout_of(x.shape(), axis);
  std::vector<double> acc(static_cast<std::size_t>(l.extent), 0.0);
  auto in = x.data();
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t c = 0; c < l.extent; ++c) {
      const float* p = in.data() + (o * l.extent + c) * l.inner;
      double s[4] = {};
      std::int64_t i = 0;
      for (; i + 4 <= l.inner; i += 4) {
        for (int k = 0; k < 4; ++k) s[k] += p[i + k];
      }
      for (; i < l.inner; ++i) s[0] += p[i];
      acc[static_cast<std::size_t>(c)] += (s[0] + s[1]) + (s[2] + s[3]);
    }
  }
  std::vector<float> out(acc.begin(), acc.end());
  Shape shape = x.shape();
  return make_result("sum_keep", {l.extent}, std::move(out), {x}, [shape, axis](const Tensor& g) {
    return std::vector<Tensor>{broadcast_along(g, shape, axis)};
  });
}

Tensor broadcast_along(const Tensor& v, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size() || v.ndim() != 1 || v.dim(0) != shape[axis]) {
    throw ShapeError("broadcast_along: vector " + shape_str(v.shape()) +
                     " does not match axis " + std::to_string(axis) + " of " + shape_str(shape));
  }
  AxisLayout l = layout_of(shape, axis);
  std::vector<float> out(static_cast<std::size_t>(shape_numel(shape)));
  auto in = v.data();
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t c = 0; c < l.extent; ++c) {
      float* p = out.data() + (o * l.extent + c) * l.inner;
      std::fill(p, p + l.inner, in[static_cast<std::size_t>(c)]);
    }
  }
  return make_result("broadcast_along", shape, std::move(out), {v},
                     [axis](const Tensor& g) { return std::vector<Tensor>{sum_keep(g, axis)}; });
}

Tensor spatial_sum(const Tensor& x) {
  if (x.ndim() < 2) {
    throw ShapeError("spatial_sum: expected (N, C, ...), got " + shape_str(x.shape()));
  }
  std::int64_t rows = x.dim(0) * x.dim(1);
  std::int64_t inner = x.numel() / rows;
  std::vector<float> out(static_cast<std::size_t>(rows));
  auto in = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t i = 0; i < inner; ++i) s += in[static_cast<std::size_t>(r * inner + i)];
    out[static_cast<std::size_t>(r)] = static_cast<float>(s);
  }
  Shape shape = x.shape();
  return make_result("spatial_sum", {x.dim(0), x.dim(1)}, std::move(out), {x},
                     [shape](const Tensor& g) { return std::vector<Tensor>{spatial_expand(g, shape)}; });
}

Tensor spatial_expand(const Tensor& v, const Shape& shape) {
  if (v.ndim() != 2 || shape.size() < 2 || v.dim(0) != shape[0] || v.dim(1) != shape[1]) {
    throw ShapeError("spatial_expand: " + shape_str(v.shape()) + " cannot expand to " +
                     shape_str(shape));
  }
  std::int64_t rows = shape[0] * shape[1];
  std::int64_t inner = shape_numel(shape) / rows;
  std::vector<float> out(static_cast<std::size_t>(rows * inner));
  auto in = v.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::fill_n(out.begin() + r * inner, inner, in[static_cast<std::size_t>(r)]);
  }
  return make_result("spatial_expand", shape, std::move(out), {v},
                     [](const Tensor& g) { return std::vector<Tensor>{spatial_sum(g)}; });
}

Tensor global_avg_pool(const Tensor& x) {
  std::int64_t spatial = x.numel() / (x.dim(0) * x.dim(1));
  return scale(spatial_sum(x), 1.0f / static_cast<float>(spatial));
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  require_ndim("matmul", a, 2);
  require_ndim("matmul", b, 2);
  std::int64_t m = transpose_a ? a.dim(1) : a.dim(0);
  std::int64_t k = transpose_a ? a.dim(0) : a.dim(1);
  std::int64_t kb = transpose_b ? b.dim(1) : b.dim(0);
  std::int64_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    std::ostringstream msg;
    msg << "matmul: inner dimensions differ (" << m << "x" << k << " times " << kb << "x" << n
        << ", operands " << shape_str(a.shape()) << " and " << shape_str(b.shape()) << ")";
    throw ShapeError(msg.str());
  }
  std::vector<float> out(static_cast<std::size_t>(m * n));
  ConstMap A(a.data().data(), a.dim(0), a.dim(1));
  ConstMap B(b.data().data(), b.dim(0), b.dim(1));
  MutMap C(out.data(), m, n);
  if (!transpose_a && !transpose_b) C.noalias() = A * B;
  else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
  else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();

  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [a, b, transpose_a, transpose_b](const Tensor& g) {
                       Tensor ga = transpose_a ? matmul(b, g, transpose_b, true)
                                               : matmul(g, b, false, !transpose_b);
                       Tensor gb = transpose_b ? matmul(g, a, true, transpose_a)
                                               : matmul(a, g, !transpose_a, false);
                       return std::vector<Tensor>{ga, gb};
                     });
}

Tensor transpose(const Tensor& x) {
  require_ndim("transpose", x, 2);
  std::int64_t r = x.dim(0), c = x.dim(1);
  std::vector<float> out(static_cast<std::size_t>(r * c));
  MutMap(out.data(), c, r) = ConstMap(x.data().data(), r, c).transpose();
  return make_result("transpose", {c, r}, std::move(out), {x},
                     [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_ndim("linear", x, 2);
  require_ndim("linear", w, 2);
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input features " + std::to_string(x.dim(1)) +
                     " do not match weight " + shape_str(w.shape()));
  }
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(0))) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  Tensor y = matmul(x, w, false, true);
  if (!b.defined()) return y;
  return add(y, broadcast_along(b, y.shape(), 1));
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.ndim() < 2 || gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != x.dim(1) ||
      beta.dim(0) != x.dim(1)) {
    throw ShapeError("channel_affine: input " + shape_str(x.shape()) + " with gamma " +
                     shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  }
  AxisLayout l = layout_of(x.shape(), 1);
  auto in = x.data();
  auto ga = gamma.data();
  auto be = beta.data();
  std::vector<float> out(in.size());
  for (std::int64_t o = 0; o < l.outer; ++o) {
    for (std::int64_t c = 0; c < l.extent; ++c) {
      std::size_t base = static_cast<std::size_t>((o * l.extent + c) * l.inner);
      float s = ga[static_cast<std::size_t>(c)], t = be[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < l.inner; ++i) out[base + i] = s * in[base + i] + t;
    }
  }
  return make_result("channel_affine", x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma](const Tensor& g) {
                       return std::vector<Tensor>{mul(g, broadcast_along(gamma, x.shape(), 1)),
                                                  sum_keep(mul(g, x), 1), sum_keep(g, 1)};
                     });
}

std::int64_t conv_out_extent(std::int64_t in, const ConvGeometry& geom) {
  std::int64_t span = in + 2 * geom.padding - geom.kernel;
  if (span < 0 || geom.stride < 1) return 0;
  return span / geom.stride + 1;
}

Tensor im2col(const Tensor& x, const ConvGeometry& geom) {
  require_ndim("im2col", x, 4);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t k = geom.kernel, s = geom.stride, pad = geom.padding;
  const std::int64_t oh = conv_out_extent(h, geom), ow = conv_out_extent(w, geom);
  if (oh <= 0 || ow <= 0 || k < 1) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " with stride " + std::to_string(s) +
                     " and padding " + std::to_string(pad) + " does not fit input " +
                     shape_str(x.shape()));
  }
  const std::int64_t cols = c * k * k;
  std::vector<float> out(static_cast<std::size_t>(n * oh * ow * cols), 0.0f);
  auto in = x.data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        float* row = out.data() + ((b * oh + i) * ow + j) * cols;
        const std::int64_t x0 = j * s - pad;
        const bool interior = x0 >= 0 && x0 + k <= w;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const float* plane = in.data() + (b * c + ch) * h * w;
          for (std::int64_t ki = 0; ki < k; ++ki) {
            std::int64_t y = i * s - pad + ki;
            if (y < 0 || y >= h) continue;
            const std::int64_t base = y * w + x0;
            float* dst = row + (ch * k + ki) * k;
            if (interior) {
              std::copy(plane + base, plane + base + k, dst);
              continue;
            }
            for (std::int64_t kj = 0; kj < k; ++kj) {
              if (x0 + kj >= 0 && x0 + kj < w) dst[kj] = plane[base + kj];
            }
          }
        }
      }
    }
  }
  Shape image_shape = x.shape();
  return make_result("im2col", {n * oh * ow, cols}, std::move(out), {x},
                     [image_shape, geom](const Tensor& g) {
                       return std::vector<Tensor>{col2im(g, image_shape, geom)};
                     });
}

Tensor col2im(const Tensor& cols_t, const Shape& image_shape, const ConvGeometry& geom) {
  if (image_shape.size() != 4) {
    throw ShapeError("col2im: image shape must be 4-D, got " + shape_str(image_shape));
  }
  const std::int64_t n = image_shape[0], c = image_shape[1], h = image_shape[2], w = image_shape[3];
  const std::int64_t k = geom.kernel, s = geom.stride, pad = geom.padding;
  const std::int64_t oh = conv_out_extent(h, geom), ow = conv_out_extent(w, geom);
  const std::int64_t cols = c * k * k;
  if (cols_t.ndim() != 2 || cols_t.dim(0) != n * oh * ow || cols_t.dim(1) != cols) {
    throw ShapeError("col2im: patch matrix " + shape_str(cols_t.shape()) +
                     " does not match image " + shape_str(image_shape));
  }
  std::vector<float> out(static_cast<std::size_t>(shape_numel(image_shape)), 0.0f);
  auto in = cols_t.data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        const float* row = in.data() + ((b * oh + i) * ow + j) * cols;
        const std::int64_t x0 = j * s - pad;
        const bool interior = x0 >= 0 && x0 + k <= w;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          float* plane = out.data() + (b * c + ch) * h * w;
          for (std::int64_t ki = 0; ki < k; ++ki) {
            std::int64_t y = i * s - pad + ki;
            if (y < 0 || y >= h) continue;
            const float* src = row + (ch * k + ki) * k;
            const std::int64_t base = y * w + x0;
            for (std::int64_t kj = 0; kj < k; ++kj) {
              if (interior || (x0 + kj >= 0 && x0 + kj < w)) plane[base + kj] += src[kj];
            }
          }
        }
      }
    }
  }
  return make_result("col2im", image_shape, std::move(out), {cols_t},
                     [geom](const Tensor& g) { return std::vector<Tensor>{im2col(g, geom)}; });
}

Tensor rows_to_nchw(const Tensor& rows, std::int64_t n, std::int64_t oh, std::int64_t ow) {
  require_ndim("rows_to_nchw", rows, 2);
  const std::int64_t spatial = oh * ow;
  if (rows.dim(0) != n * spatial) {
    throw ShapeError("rows_to_nchw: " + shape_str(rows.shape()) + " does not hold " +
                     std::to_string(n) + "x" + std::to_string(oh) + "x" + std::to_string(ow) +
                     " positions");
  }
  const std::int64_t c = rows.dim(1);
  std::vector<float> out(static_cast<std::size_t>(rows.numel()));
  auto in = rows.data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t p = 0; p < spatial; ++p) {
      const float* src = in.data() + (b * spatial + p) * c;
      for (std::int64_t ch = 0; ch < c; ++ch) out[static_cast<std::size_t>((b * c + ch) * spatial + p)] = src[ch];
    }
  }
  return make_result("rows_to_nchw", {n, c, oh, ow}, std::move(out), {rows},
                     [](const Tensor& g) { return std::vector<Tensor>{nchw_to_rows(g)}; });
}

Tensor nchw_to_rows(const Tensor& x) {
  require_ndim("nchw_to_rows", x, 4);
  const std::int64_t n = x.dim(0), c = x.dim(1), oh = x.dim(2), ow = x.dim(3);
  const std::int64_t spatial = oh * ow;
  std::vector<float> out(static_cast<std::size_t>(x.numel()));
  auto in = x.data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float* src = in.data() + (b * c + ch) * spatial;
      for (std::int64_t p = 0; p < spatial; ++p) out[static_cast<std::size_t>((b * spatial + p) * c + ch)] = src[p];
    }
  }
  return make_result("nchw_to_rows", {n * spatial, c}, std::move(out), {x},
                     [n, oh, ow](const Tensor& g) {
                       return std::vector<Tensor>{rows_to_nchw(g, n, oh, ow)};
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvGeometry& geom) {
  require_ndim("conv2d", x, 4);
  require_ndim("conv2d", w, 4);
  if (w.dim(1) != x.dim(1) || w.dim(2) != geom.kernel || w.dim(3) != geom.kernel) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                     shape_str(x.shape()) + " with kernel " + std::to_string(geom.kernel));
  }
  const std::int64_t oh = conv_out_extent(x.dim(2), geom);
  const std::int64_t ow = conv_out_extent(x.dim(3), geom);
  Tensor cols = im2col(x, geom);
  Tensor wm = reshape(w, {w.dim(0), w.dim(1) * geom.kernel * geom.kernel});
  return rows_to_nchw(matmul(cols, wm, false, true), x.dim(0), oh, ow);
}

Tensor softmax(const Tensor& logits) {
  require_ndim("softmax", logits, 2);
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  auto in = logits.data();
  std::vector<float> out(in.size());
  for (std::int64_t r = 0; r < b; ++r) {
    const float* x = in.data() + r * k;
    float* y = out.data() + r * k;
    float mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(x[j] - mx));
    for (std::int64_t j = 0; j < k; ++j) {
      y[j] = static_cast<float>(std::exp(static_cast<double>(x[j] - mx)) / z);
    }
  }
  return make_result("softmax", logits.shape(), std::move(out), {logits}, [logits](const Tensor& g) {
    Tensor s = softmax(logits);
    Tensor dot = sum_keep(mul(g, s), 0);
    return std::vector<Tensor>{mul(s, sub(g, broadcast_along(dot, logits.shape(), 0)))};
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels) {
  require_ndim("softmax_cross_entropy", logits, 2);
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(b));
  }
  for (auto y : labels) {
    if (y < 0 || y >= k) {
      throw Error("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                  std::to_string(k) + ")");
    }
  }
  auto in = logits.data();
  double total = 0.0;
  for (std::int64_t r = 0; r < b; ++r) {
    const float* x = in.data() + r * k;
    float mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(x[j] - mx));
    total += std::log(z) + mx - x[labels[static_cast<std::size_t>(r)]];
  }
  return make_result("softmax_cross_entropy", {1}, {static_cast<float>(total / static_cast<double>(b))},
                     {logits}, [logits, labels](const Tensor& g) {
                       const std::int64_t rows = logits.dim(0), classes = logits.dim(1);
                       std::vector<float> onehot(static_cast<std::size_t>(rows * classes), 0.0f);
                       for (std::int64_t r = 0; r < rows; ++r) {
                         onehot[static_cast<std::size_t>(r * classes + labels[static_cast<std::size_t>(r)])] = 1.0f;
                       }
                       Tensor diff = sub(softmax(logits), Tensor::from(logits.shape(), std::move(onehot)));
                       return std::vector<Tensor>{
                           mul_scalar(scale(diff, 1.0f / static_cast<float>(rows)), g)};
                     });
}

Tensor forward_op(const std::string& kind, const std::vector<Tensor>& inputs, const OpArgs& args) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(kind + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  if (kind == "matmul") { arity(2); return matmul(inputs[0], inputs[1]); }
  if (kind == "conv2d") { arity(2); return conv2d(inputs[0], inputs[1], args.conv); }
  if (kind == "add") { arity(2); return add(inputs[0], inputs[1]); }
  if (kind == "relu") { arity(1); return relu(inputs[0]); }
  if (kind == "mean") { arity(1); return mean(inputs[0]); }
  if (kind == "variance") { arity(1); return variance(inputs[0]); }
  if (kind == "affine") { arity(3); return channel_affine(inputs[0], inputs[1], inputs[2]); }
  if (kind == "softmax_ce") { arity(1); return softmax_cross_entropy(inputs[0], args.labels); }
  if (kind == "square") { arity(1); return square(inputs[0]); }
  if (kind == "sqrt") { arity(1); return sqrt(inputs[0]); }
  throw Error("forward_op: unknown operator '" + kind + "'");
}

}  // namespace fpq
