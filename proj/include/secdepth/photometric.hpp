#pragma once

#include "secdepth/camera.hpp"
#include "secdepth/tensor.hpp"

namespace secdepth {

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr double kSsimWeight = 0.425;  // 0.85 / 2
constexpr double kL1Weight = 0.15;

namespace detail {

inline Tensor box3(const Tensor& x) {
  static const Tensor kBox = Tensor::from({3, 3, 1, 1}, std::vector<double>(9, 1.0 / 9.0));
  return conv2d(x, kBox, 1, 1, PadMode::kReplicate);
}

inline Tensor clamp_unit_interval(const Tensor& x) {
  // clamp to [−1, 1]: min(max(x, −1), 1) = −max(−max(x, −1), −1)
  return -max_with(-max_with(x, -1.0), -1.0);
}

}  // namespace detail

/// Per-pixel SSIM between two H×W×C images using 3×3 mean pooling with
/// replicate padding; channel-averaged, clamped to [−1, 1].
inline Tensor ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.shape().size() != 3) {
    throw std::invalid_argument("ssim expects two HxWxC images of equal shape");
  }
  const std::size_t channels = a.shape()[2];
  Tensor acc;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    Tensor ac = slice_channel(a, ch);
    Tensor bc = slice_channel(b, ch);
    Tensor mu_a = detail::box3(ac);
    Tensor mu_b = detail::box3(bc);
    Tensor var_a = detail::box3(ac * ac) - mu_a * mu_a;
    Tensor var_b = detail::box3(bc * bc) - mu_b * mu_b;
    Tensor cov = detail::box3(ac * bc) - mu_a * mu_b;
    Tensor num = (2.0 * mu_a * mu_b + kSsimC1) * (2.0 * cov + kSsimC2);
    Tensor den = (mu_a * mu_a + mu_b * mu_b + kSsimC1) * (var_a + var_b + kSsimC2);
    Tensor s = num / den;
    acc = ch == 0 ? s : acc + s;
  }
  Tensor per_pixel = channels == 1 ? acc : acc / static_cast<double>(channels);
  Tensor clamped = detail::clamp_unit_interval(per_pixel);
  return sum(clamped, {2});  // HxWx1 -> HxW
}

/// Reconstruction loss: mean over pixels of
/// 0.425·(1 − SSIM(I, Ĩ)) + 0.15·|I − Ĩ|.
inline Tensor photometric_loss(const Tensor& target, const Tensor& warped) {
  if (target.shape() != warped.shape()) {
    throw std::invalid_argument("photometric_loss: shape mismatch");
  }
  Tensor ssim_term = mean(1.0 - ssim(target, warped)) * kSsimWeight;
  Tensor l1_term = mean(abs(target - warped)) * kL1Weight;
  return ssim_term + l1_term;
}

}  // namespace secdepth
