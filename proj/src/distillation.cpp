#include "fpq/distillation.hpp"

#include "fpq/error.hpp"
#include "fpq/ops.hpp"

namespace fpq {

Tensor standardize(const Tensor& z, float eps) {
  if (z.ndim() < 2) throw ShapeError("standardize: expected (N, C, ...) input, got " + shape_str(z.shape()));
  if (!(eps > 0.0f)) throw Error("standardize: eps must be positive");
  const float inv_count = static_cast<float>(z.dim(1)) / static_cast<float>(z.numel());
  Tensor mu = scale(sum_keep(z, 1), inv_count);
  Tensor centered = sub(z, broadcast_along(mu, z.shape(), 1));
  Tensor var = scale(sum_keep(square(centered), 1), inv_count);
  Tensor inv_std = reciprocal(sqrt(add_scalar(var, eps)));
  return mul(centered, broadcast_along(inv_std, z.shape(), 1));
}

Tensor csd_loss(const std::vector<LayerTap>& taps, const CsdOptions& options) {
  Tensor total = Tensor::zeros({1});
  for (const auto& tap : taps) {
    if (tap.student.shape() != tap.teacher.shape()) {
      throw ShapeError("csd_loss: layer " + std::to_string(tap.layer) + " student tap " +
                       shape_str(tap.student.shape()) + " does not match teacher tap " +
                       shape_str(tap.teacher.shape()));
    }
    Tensor target = standardize(tap.teacher.detach(), options.eps).detach();
    Tensor term = sum(square(sub(target, standardize(tap.student, options.eps))));
    if (options.reduction == CsdReduction::Mean) term = scale(term, 1.0f / static_cast<float>(tap.student.numel()));
    total = add(total, term);
  }
  return total;
}

LossBreakdown total_loss(const Tensor& student_logits, const std::vector<std::int32_t>& labels,
                         const std::vector<LayerTap>& taps, const TotalLossOptions& options) {
  if (student_logits.ndim() != 2) {
    throw ShapeError("total_loss: logits must be (batch, classes), got " + shape_str(student_logits.shape()));
  }
  Tensor ce = softmax_cross_entropy(student_logits, labels);
  LossBreakdown out;
  out.ce = ce.item();
  if (taps.empty()) {
    out.loss = ce;
  } else if (options.csd_weight == 0.0f) {
    // Still reported so ablation cells without distillation log the gap.
    NoGradGuard no_grad;
    out.csd = csd_loss(taps, options.csd).item();
    out.loss = ce;
  } else {
    Tensor csd = csd_loss(taps, options.csd);
    out.csd = csd.item();
    out.loss = add(ce, scale(csd, options.csd_weight));
  }
  out.total = out.loss.item();
  return out;
}

}  // namespace fpq
