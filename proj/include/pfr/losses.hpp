#pragma once

// Training objective: scale-factor estimation, confidence-weighted pointmap
// regression, alpha-masked photometric MSE, and their weighted combination.
// Ground truth enters as constants; predictions are tape tensors. Both sides
// of the regression are normalized by their own scale factor, which makes the
// loss invariant to global ground-truth rescaling.

#include <vector>

#include "pfr/tensor.hpp"

namespace pfr {

struct LossReport {
  double l_conf = 0;
  double l_mmse = 0;
  double total = 0;
  double z_pred = 0;
  double z_gt = 0;
  double masked_fraction = 0;  // fraction of photometric pixels masked out
  double step_ms = 0;
};

using ValidityMask = std::vector<uint8_t>;  // per-pixel, flattened H*W

namespace detail {
inline int64_t count_valid(const std::vector<ValidityMask>& valid) {
  int64_t n = 0;
  for (const auto& m : valid)
    for (uint8_t v : m) n += (v != 0);
  return n;
}
}  // namespace detail

// Mean Euclidean norm of all valid points across frames (plain values).
inline double scale_factor_value(const std::vector<const float*>& pointmaps,
                                 const std::vector<ValidityMask>& valid, size_t pixels) {
  double sum = 0;
  int64_t count = 0;
  for (size_t t = 0; t < pointmaps.size(); ++t) {
    for (size_t p = 0; p < pixels; ++p) {
      if (!valid[t][p]) continue;
      const float* x = pointmaps[t] + p * 3;
      sum += std::sqrt(double(x[0]) * x[0] + double(x[1]) * x[1] + double(x[2]) * x[2]);
      ++count;
    }
  }
  if (count == 0) throw ValueError("scale_factor: zero valid pixels");
  return sum / static_cast<double>(count);
}

// Tape version: z = mean norm over valid pixels of all frames' predicted
// pointmaps. Each pointmap is [H x W x 3].
template <typename T>
Tensor<T> scale_factor(const std::vector<Tensor<T>>& pointmaps,
                       const std::vector<ValidityMask>& valid) {
  if (pointmaps.empty() || pointmaps.size() != valid.size())
    throw ShapeError("scale_factor: pointmap/mask count mismatch");
  int64_t total = detail::count_valid(valid);
  if (total == 0) throw ValueError("scale_factor: zero valid pixels");
  Tape<T>& tp = *pointmaps[0].tape;
  Tensor<T> acc = tp.scalar(T(0));
  for (size_t t = 0; t < pointmaps.size(); ++t) {
    const int64_t pixels = pointmaps[t].numel() / 3;
    if (static_cast<int64_t>(valid[t].size()) != pixels)
      throw ShapeError("scale_factor: mask size mismatch");
    auto flat = reshape(pointmaps[t], {static_cast<int>(pixels), 3});
    auto norms = sqrt_(sum_lastdim(square(flat)));
    bool any = false;
    for (uint8_t v : valid[t]) any |= (v != 0);
    if (!any) continue;
    acc = add(acc, sum_all(masked_select(norms, valid[t])));
  }
  return mul_scalar(acc, T(1) / static_cast<T>(total));
}

// Per-pixel regression residual: || X_gt/z_gt - X_pred/z_pred ||_2, zero at
// invalid pixels. X_gt enters as values, X_pred as a tensor [H x W x 3].
template <typename T>
Tensor<T> regr_loss(const std::vector<float>& x_gt, double z_gt, const Tensor<T>& x_pred,
                    const Tensor<T>& z_pred, const ValidityMask& valid) {
  const int64_t pixels = x_pred.numel() / 3;
  if (static_cast<int64_t>(x_gt.size()) != pixels * 3 ||
      static_cast<int64_t>(valid.size()) != pixels)
    throw ShapeError("regr_loss: shape mismatch");
  Tape<T>& tp = *x_pred.tape;
  std::vector<T> gt_scaled(x_gt.size());
  for (size_t i = 0; i < x_gt.size(); ++i) gt_scaled[i] = static_cast<T>(x_gt[i] / z_gt);
  std::vector<T> mask3(x_gt.size());
  for (int64_t p = 0; p < pixels; ++p)
    for (int c = 0; c < 3; ++c) mask3[static_cast<size_t>(p * 3 + c)] = valid[static_cast<size_t>(p)] ? T(1) : T(0);
  auto flat = reshape(x_pred, {static_cast<int>(pixels), 3});
  auto pred_scaled = div(flat, z_pred);
  auto diff = sub(pred_scaled, tp.constant({static_cast<int>(pixels), 3}, gt_scaled));
  auto masked = mul(diff, tp.constant({static_cast<int>(pixels), 3}, mask3));
  return sqrt_(sum_lastdim(square(masked)));
}

// Mean over valid pixels of C * l_regr - alpha * log(C). C must be >= 1.
template <typename T>
Tensor<T> conf_loss(const Tensor<T>& l_regr, const Tensor<T>& conf, const ValidityMask& valid,
                    T alpha) {
  if (alpha <= T(0)) throw ValueError("conf_loss: alpha must be > 0");
  if (l_regr.numel() != conf.numel() || l_regr.numel() != static_cast<int64_t>(valid.size()))
    throw ShapeError("conf_loss: shape mismatch");
  for (int64_t i = 0; i < conf.numel(); ++i)
    if (conf.val()[static_cast<size_t>(i)] < T(1))
      throw ValueError(strfmt("conf_loss: confidence %.6f < 1 at index %lld",
                              double(conf.val()[static_cast<size_t>(i)]), static_cast<long long>(i)));
  int64_t count = 0;
  for (uint8_t v : valid) count += (v != 0);
  if (count == 0) throw ValueError("conf_loss: zero valid pixels");
  auto lr = masked_select(reshape(l_regr, {static_cast<int>(l_regr.numel())}), valid);
  auto c = masked_select(reshape(conf, {static_cast<int>(conf.numel())}), valid);
  auto per_pixel = sub(mul(c, lr), mul_scalar(log_(c), alpha));
  return mean_all(per_pixel);
}

// Multi-frame confidence loss: one mean over all valid pixels of all frames.
template <typename T>
Tensor<T> conf_loss_frames(const std::vector<Tensor<T>>& l_regr,
                           const std::vector<Tensor<T>>& conf,
                           const std::vector<ValidityMask>& valid, T alpha) {
  if (l_regr.empty() || l_regr.size() != conf.size() || l_regr.size() != valid.size())
    throw ShapeError("conf_loss_frames: frame count mismatch");
  Tape<T>& tp = *l_regr[0].tape;
  int64_t total = detail::count_valid(valid);
  if (total == 0) throw ValueError("conf_loss_frames: zero valid pixels");
  Tensor<T> acc = tp.scalar(T(0));
  for (size_t t = 0; t < l_regr.size(); ++t) {
    for (int64_t i = 0; i < conf[t].numel(); ++i)
      if (conf[t].val()[static_cast<size_t>(i)] < T(1))
        throw ValueError("conf_loss_frames: confidence < 1");
    bool any = false;
    for (uint8_t v : valid[t]) any |= (v != 0);
    if (!any) continue;
    auto lr = masked_select(reshape(l_regr[t], {static_cast<int>(l_regr[t].numel())}), valid[t]);
    auto c = masked_select(reshape(conf[t], {static_cast<int>(conf[t].numel())}), valid[t]);
    acc = add(acc, sum_all(sub(mul(c, lr), mul_scalar(log_(c), alpha))));
  }
  return mul_scalar(acc, T(1) / static_cast<T>(total));
}

template <typename T>
struct MaskedMse {
  Tensor<T> loss;
  int64_t mask_count = 0;
  double masked_fraction = 0;  // fraction of pixels excluded by the mask
};

// Photometric loss restricted to pixels where rendered alpha passes the
// threshold. The mask is a constant with respect to gradients; with an empty
// mask the loss is a constant zero (no gradient flows).
template <typename T>
MaskedMse<T> masked_mse(const std::vector<float>& i_gt, const Tensor<T>& i_pred,
                        const std::vector<T>& alpha_map, float th_alpha) {
  if (th_alpha < 0) throw ValueError("masked_mse: th_alpha must be >= 0");
  const int64_t pixels = i_pred.numel() / 3;
  if (static_cast<int64_t>(i_gt.size()) != pixels * 3 ||
      static_cast<int64_t>(alpha_map.size()) != pixels)
    throw ShapeError("masked_mse: shape mismatch");
  Tape<T>& tp = *i_pred.tape;
  int64_t m_count = 0;
  std::vector<T> mask3(i_gt.size(), T(0));
  for (int64_t p = 0; p < pixels; ++p) {
    if (static_cast<float>(alpha_map[static_cast<size_t>(p)]) >= th_alpha) {
      ++m_count;
      for (int c = 0; c < 3; ++c) mask3[static_cast<size_t>(p * 3 + c)] = T(1);
    }
  }
  MaskedMse<T> out;
  out.mask_count = m_count;
  out.masked_fraction = 1.0 - static_cast<double>(m_count) / static_cast<double>(pixels);
  if (m_count == 0) {
    out.loss = tp.scalar(T(0));
    return out;
  }
  std::vector<T> gt(i_gt.begin(), i_gt.end());
  auto diff = sub(i_pred, tp.constant(i_pred.shape(), gt));
  auto masked = mul(reshape(square(diff), {static_cast<int>(pixels * 3)}),
                    tp.constant({static_cast<int>(pixels * 3)}, mask3));
  out.loss = mul_scalar(sum_all(masked), T(1) / static_cast<T>(3 * m_count));
  return out;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_conf, const Tensor<T>& l_mmse, T lambda) {
  if (lambda < T(0)) throw ValueError("total_loss: lambda must be >= 0");
  return add(l_conf, mul_scalar(l_mmse, lambda));
}

}  // namespace pfr
