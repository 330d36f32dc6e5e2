#pragma once

#include "secdepth/tensor.hpp"

namespace secdepth {

/// Rectified-stereo camera: the relative pose between the views is a pure
/// horizontal translation of the baseline, so view synthesis reduces to a
/// per-row shift by disparity.
struct CameraModel {
  double focal = 100.0;       // focal length, pixels
  double cx = 0.0, cy = 0.0;  // principal point (unused by the horizontal warp)
  double baseline = 0.5;      // meters, translation (+B, 0, 0)
  double disp_to_px = 16.0;   // pixel shift at normalized disparity 1.0

  void validate() const {
    if (focal <= 0.0 || baseline <= 0.0 || disp_to_px <= 0.0) {
      throw std::invalid_argument("camera: focal, baseline and disp_to_px must be positive");
    }
  }
};

struct ImagePair {
  Tensor target;  // H×W×C in [0,1]
  Tensor source;  // H×W×C in [0,1]

  void validate() const {
    if (target.shape() != source.shape()) {
      throw std::invalid_argument("image pair: shape mismatch");
    }
    for (double v : target.data()) {
      if (v < 0.0 || v > 1.0) throw std::invalid_argument("image pair: target out of [0,1]");
    }
    for (double v : source.data()) {
      if (v < 0.0 || v > 1.0) throw std::invalid_argument("image pair: source out of [0,1]");
    }
  }
};

struct DepthResult {
  Tensor depth;
  std::size_t clamped_pixels = 0;  // inputs below the disparity floor
};

constexpr double kDisparityFloor = 1e-4;

/// depth = focal·baseline / (disparity·disp_to_px), with disparity clamped to
/// a small floor so the division never blows up.
inline DepthResult disparity_to_depth(const Tensor& disparity, const CameraModel& cam) {
  cam.validate();
  if (disparity.shape().size() != 2) {
    throw std::invalid_argument("disparity_to_depth expects an HxW map");
  }
  std::size_t clamped = 0;
  for (double v : disparity.data()) {
    if (v < kDisparityFloor) ++clamped;
  }
  Tensor clamped_disp = max_with(disparity, kDisparityFloor);
  Tensor depth = (cam.focal * cam.baseline) / (clamped_disp * cam.disp_to_px);
  return {depth, clamped};
}

/// Synthesizes the target view by sampling the source at x − D(x,y)·disp_to_px
/// with linear interpolation along the row and border replication.
/// Differentiable w.r.t. the disparity map (and the source image).
inline Tensor warp(const Tensor& source, const Tensor& disparity, const CameraModel& cam) {
  cam.validate();
  if (source.shape().size() != 3) throw std::invalid_argument("warp expects an HxWxC source");
  if (disparity.shape().size() != 2 || disparity.shape()[0] != source.shape()[0] ||
      disparity.shape()[1] != source.shape()[1]) {
    throw std::invalid_argument("warp: disparity shape " + shape_str(disparity.shape()) +
                                " does not match source " + shape_str(source.shape()));
  }
  const std::size_t h = source.shape()[0], w = source.shape()[1], c = source.shape()[2];
  const double scale = cam.disp_to_px;
  const auto& src = source.data();
  const auto& disp = disparity.data();

  std::vector<double> out(h * w * c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) - disp[y * w + x] * scale;
      const double uc = std::min(std::max(u, 0.0), static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(uc);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double t = uc - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        out[(y * w + x) * c + k] =
            (1.0 - t) * src[(y * w + x0) * c + k] + t * src[(y * w + x1) * c + k];
      }
    }
  }

  auto src_t = source;
  auto disp_t = disparity;
  return make_op_result(
      source.shape(), std::move(out), "warp", {&source, &disparity},
      [src_t, disp_t, h, w, c, scale](const double* adj, Tape& tape,
                                      const std::vector<std::int64_t>& in) {
        const auto& src = src_t.data();
        const auto& disp = disp_t.data();
        double* gsrc = in[0] >= 0 ? tape.adjoint_for(in[0], h * w * c) : nullptr;
        double* gdisp = in[1] >= 0 ? tape.adjoint_for(in[1], h * w) : nullptr;
        if (gsrc == nullptr && gdisp == nullptr) return;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double u = static_cast<double>(x) - disp[y * w + x] * scale;
            const bool clamped = u <= 0.0 || u >= static_cast<double>(w - 1);
            const double uc = std::min(std::max(u, 0.0), static_cast<double>(w - 1));
            const std::size_t x0 = static_cast<std::size_t>(uc);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double t = uc - static_cast<double>(x0);
            for (std::size_t k = 0; k < c; ++k) {
              const double a = adj[(y * w + x) * c + k];
              if (gsrc != nullptr) {
                gsrc[(y * w + x0) * c + k] += a * (1.0 - t);
                gsrc[(y * w + x1) * c + k] += a * t;
              }
              if (gdisp != nullptr && !clamped) {
                const double dv = src[(y * w + x1) * c + k] - src[(y * w + x0) * c + k];
                gdisp[y * w + x] += a * dv * (-scale);
              }
            }
          }
        }
      });
}

}  // namespace secdepth
