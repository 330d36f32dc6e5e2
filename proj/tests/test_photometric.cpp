#include <catch_amalgamated.hpp>

#include <cstring>

#include "secdepth/gradcheck.hpp"
#include "secdepth/photometric.hpp"
#include "secdepth/rng.hpp"

using namespace secdepth;

namespace {

Tensor random_image(std::size_t h, std::size_t w, Rng& rng, double lo = 0.1, double hi = 0.9) {
  std::vector<double> d(h * w);
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor::from({h, w, 1}, std::move(d));
}

// Per-pixel sampling loop, independent of the tensor-op implementation.
std::vector<double> warp_oracle(const Tensor& src, const Tensor& disp, double scale) {
  const std::size_t h = src.shape()[0], w = src.shape()[1];
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double u = double(x) - disp.at(y, x) * scale;
      u = std::min(std::max(u, 0.0), double(w - 1));
      const auto x0 = std::size_t(u);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double t = u - double(x0);
      out[y * w + x] = (1.0 - t) * src.at(y, x0, 0) + t * src.at(y, x1, 0);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("disparity_to_depth") {
  CameraModel cam;
  cam.focal = 100.0;
  cam.baseline = 0.5;
  cam.disp_to_px = 50.0;

  auto r = disparity_to_depth(Tensor::full({2, 2}, 1.0), cam);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.depth.at(i) == Catch::Approx(1.0));
  CHECK(r.clamped_pixels == 0);

  auto half = disparity_to_depth(Tensor::full({2, 2}, 0.5), cam);
  CHECK(half.depth.at(0) == Catch::Approx(2.0));

  auto tiny = disparity_to_depth(Tensor::from({1, 2}, {0.0, 0.5}), cam);
  CHECK(tiny.clamped_pixels == 1);
  CHECK(tiny.depth.at(0) == Catch::Approx(100.0 * 0.5 / (kDisparityFloor * 50.0)));
}

TEST_CASE("warp with zero disparity is the identity") {
  Rng rng(3);
  Tensor src = random_image(6, 9, rng);
  CameraModel cam;
  Tensor out = warp(src, Tensor::zeros({6, 9}), cam);
  REQUIRE(out.shape() == src.shape());
  for (std::size_t i = 0; i < src.numel(); ++i) {
    CHECK(std::memcmp(&out.data()[i], &src.data()[i], sizeof(double)) == 0);
  }
}

TEST_CASE("warp matches the per-pixel loop oracle") {
  Rng rng(5);
  CameraModel cam;
  cam.disp_to_px = 4.0;

  // constant-column image, constant disparity: shift by k pixels
  const std::size_t h = 4, w = 12;
  std::vector<double> cols(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) cols[y * w + x] = double(x) / double(w);
  Tensor src = Tensor::from({h, w, 1}, cols);
  Tensor disp = Tensor::full({h, w}, 0.5);  // shift of 2 px
  Tensor out = warp(src, disp, cam);
  auto expect = warp_oracle(src, disp, cam.disp_to_px);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == Catch::Approx(expect[i]));
  // interior columns shifted exactly
  CHECK(out.at(1, 7, 0) == Catch::Approx(src.at(1, 5, 0)));

  // random disparity vs oracle
  std::vector<double> d(h * w);
  for (auto& v : d) v = rng.uniform(0.0, 1.0);
  Tensor rd = Tensor::from({h, w}, d);
  Tensor img = random_image(h, w, rng);
  Tensor out2 = warp(img, rd, cam);
  auto expect2 = warp_oracle(img, rd, cam.disp_to_px);
  for (std::size_t i = 0; i < out2.numel(); ++i) CHECK(out2.at(i) == Catch::Approx(expect2[i]));
}

TEST_CASE("ssim examples") {
  Rng rng(9);
  Tensor img = random_image(6, 6, rng);
  Tensor s = ssim(img, img);
  REQUIRE(s.shape() == Shape{6, 6});
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(s.at(i) == Catch::Approx(1.0));

  // inverted image: only the upper bound is asserted
  std::vector<double> invd(36);
  for (std::size_t i = 0; i < 36; ++i) invd[i] = 1.0 - img.at(i);
  Tensor s2 = ssim(img, Tensor::from({6, 6, 1}, invd));
  for (std::size_t i = 0; i < s2.numel(); ++i) CHECK(s2.at(i) <= 1.0);

  // constant images: closed-form luminance term
  Tensor a = Tensor::full({5, 5, 1}, 0.3);
  Tensor b = Tensor::full({5, 5, 1}, 0.7);
  const double expected = (2.0 * 0.3 * 0.7 + kSsimC1) / (0.3 * 0.3 + 0.7 * 0.7 + kSsimC1);
  Tensor s3 = ssim(a, b);
  CHECK(s3.at(2, 2) == Catch::Approx(expected).epsilon(1e-10));
  CHECK(s3.at(2, 2) == Catch::Approx(0.7241).margin(1e-4));
}

TEST_CASE("photometric loss examples") {
  Tensor a = Tensor::full({5, 5, 1}, 0.4);
  CHECK(photometric_loss(a, a).item() == Catch::Approx(0.0).margin(1e-15));

  Tensor b = Tensor::full({5, 5, 1}, 0.5);
  const double lum = (2.0 * 0.4 * 0.5 + kSsimC1) / (0.4 * 0.4 + 0.5 * 0.5 + kSsimC1);
  const double expected = kSsimWeight * (1.0 - lum) + kL1Weight * 0.1;
  CHECK(photometric_loss(a, b).item() == Catch::Approx(expected).epsilon(1e-9));
  CHECK(kL1Weight * 0.1 == Catch::Approx(0.015));

  // symmetric for constant images
  CHECK(photometric_loss(a, b).item() == Catch::Approx(photometric_loss(b, a).item()));

  // non-negative on random inputs
  Rng rng(17);
  for (int i = 0; i < 10; ++i) {
    Tensor x = random_image(4, 4, rng);
    Tensor y = random_image(4, 4, rng);
    CHECK(photometric_loss(x, y).item() >= 0.0);
  }
}

TEST_CASE("photometric loss gradient w.r.t. disparity") {
  Rng rng(23);
  CameraModel cam;
  cam.disp_to_px = 3.0;
  Tensor target = random_image(8, 8, rng);
  Tensor source = random_image(8, 8, rng);
  std::vector<double> d(64);
  for (auto& v : d) v = rng.uniform(0.15, 0.85);
  Tensor disp = Tensor::from({8, 8}, d);

  double err = gradcheck(
      [&](const Tensor& t) { return photometric_loss(target, warp(source, t, cam)); }, disp);
  CHECK(err < 1e-4);
}

TEST_CASE("warped loss with matching inputs equals the clean path") {
  // When the augmented input equals the clean image, the disparity computed
  // from it matches the clean disparity, so the reconstruction loss is equal.
  Rng rng(31);
  CameraModel cam;
  Tensor target = random_image(6, 8, rng);
  Tensor source = random_image(6, 8, rng);
  std::vector<double> d(48);
  for (auto& v : d) v = rng.uniform(0.1, 0.9);
  Tensor disp_clean = Tensor::from({6, 8}, d);
  Tensor disp_aug = Tensor::from({6, 8}, d);  // same predictor, same input
  double clean = photometric_loss(target, warp(source, disp_clean, cam)).item();
  double aug = photometric_loss(target, warp(source, disp_aug, cam)).item();
  CHECK(clean == aug);
}
