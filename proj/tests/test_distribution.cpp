#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "secdepth/distribution.hpp"
#include "secdepth/gradcheck.hpp"
#include "secdepth/rng.hpp"

using namespace secdepth;

namespace {

// Naive per-pixel, per-bin evaluation, written independently of soft_bin.
std::vector<double> soft_bin_oracle(const std::vector<double>& disp, std::size_t bins) {
  const double sigma = 1.0 / (2.0 * double(bins));
  const double norm = 1.0 / (sigma * std::sqrt(2.0 * M_PI));
  std::vector<double> acc(bins, 0.0);
  for (double d : disp) {
    for (std::size_t n = 0; n < bins; ++n) {
      const double c = (double(n) + 0.5) / double(bins);
      acc[n] += norm * std::exp(-(d - c) * (d - c) / (2.0 * sigma * sigma));
    }
  }
  double total = std::accumulate(acc.begin(), acc.end(), 0.0);
  for (auto& v : acc) v /= total;
  return acc;
}

Tensor random_disparity(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> d(h * w);
  for (auto& v : d) v = rng.uniform(0.0, 1.0);
  return Tensor::from({h, w}, std::move(d));
}

}  // namespace

TEST_CASE("bin spec geometry") {
  BinSpec spec(32);
  CHECK(spec.sigma() == Catch::Approx(1.0 / 64.0));
  CHECK(spec.center(0) == Catch::Approx(0.5 / 32.0));
  CHECK(spec.center(31) == Catch::Approx(31.5 / 32.0));
  for (std::size_t n = 1; n < 32; ++n) CHECK(spec.center(n) > spec.center(n - 1));
  CHECK(spec.center(0) > 0.0);
  CHECK(spec.center(31) < 1.0);
  CHECK_THROWS_AS(BinSpec(0), std::invalid_argument);
}

TEST_CASE("soft_bin single-pixel example") {
  // N=4, one pixel at the first bin center: relative weights 1, e^-2, e^-8, e^-18
  auto dist = soft_bin(Tensor::from({1, 1}, {0.125}), BinSpec(4));
  const double z = 1.0 + std::exp(-2.0) + std::exp(-8.0) + std::exp(-18.0);
  CHECK(dist.p.at(0) == Catch::Approx(1.0 / z).epsilon(1e-12));
  CHECK(dist.p.at(1) == Catch::Approx(std::exp(-2.0) / z).epsilon(1e-12));
  CHECK(dist.p.at(0) == Catch::Approx(0.880).margin(5e-4));
  CHECK(dist.p.at(1) == Catch::Approx(0.119).margin(5e-4));
  CHECK(dist.p.at(2) == Catch::Approx(0.000).margin(5e-4));
  CHECK(dist.p.at(3) == Catch::Approx(0.000).margin(5e-4));
}

TEST_CASE("constant map at a bin center gives a symmetric distribution") {
  BinSpec spec(8);
  const std::size_t center_bin = 3;
  auto dist = soft_bin(Tensor::full({4, 4}, spec.center(center_bin)), spec);
  for (std::size_t k = 1; k <= 3; ++k) {
    CHECK(dist.p.at(center_bin - k) == Catch::Approx(dist.p.at(center_bin + k)).epsilon(1e-12));
  }
}

TEST_CASE("soft_bin matches the naive double loop") {
  Rng rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor d = random_disparity(6, 7, rng);
    auto dist = soft_bin(d, BinSpec(32));
    auto expect = soft_bin_oracle(d.data(), 32);
    for (std::size_t n = 0; n < 32; ++n) {
      CHECK(std::abs(dist.p.at(n) - expect[n]) < 1e-10);
    }
  }
}

TEST_CASE("soft_bin outputs are valid distributions") {
  Rng rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor d = trial % 10 == 0 ? Tensor::full({4, 4}, rng.uniform(0.0, 1.0))
                               : random_disparity(4, 4, rng);
    auto dist = soft_bin(d, BinSpec(32));
    double total = 0.0;
    for (std::size_t n = 0; n < 32; ++n) {
      CHECK(dist.p.at(n) >= 0.0);
      total += dist.p.at(n);
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
    CHECK_NOTHROW(DepthDistribution::from_tensor(dist.p));
  }
}

TEST_CASE("soft_bin is permutation invariant over pixels") {
  Rng rng(47);
  Tensor d = random_disparity(5, 5, rng);
  std::vector<double> shuffled = d.data();
  rng.shuffle(shuffled);
  auto a = soft_bin(d, BinSpec(16));
  auto b = soft_bin(Tensor::from({5, 5}, shuffled), BinSpec(16));
  for (std::size_t n = 0; n < 16; ++n) {
    CHECK(std::abs(a.p.at(n) - b.p.at(n)) < 1e-12);
  }
}

TEST_CASE("js divergence frozen values") {
  auto P = DepthDistribution::from_tensor(Tensor::from({2}, {1.0, 0.0}));
  auto Q = DepthDistribution::from_tensor(Tensor::from({2}, {0.5, 0.5}));

  // M = [0.75, 0.25]; KL(P||M) = ln(4/3); KL(Q||M) = ½ln(2/3) + ½ln 2
  const double expected =
      0.5 * std::log(4.0 / 3.0) + 0.5 * (0.5 * std::log(2.0 / 3.0) + 0.5 * std::log(2.0));
  CHECK(js_divergence(P, Q).item() == Catch::Approx(expected).epsilon(1e-12));
  CHECK(js_divergence(P, Q).item() == Catch::Approx(0.215762).margin(1e-6));

  CHECK(js_divergence(P, P).item() == 0.0);

  auto R = DepthDistribution::from_tensor(Tensor::from({2}, {0.0, 1.0}));
  CHECK(js_divergence(P, R).item() == Catch::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS_AS(
      js_divergence(P, DepthDistribution::from_tensor(Tensor::from({3}, {0.2, 0.3, 0.5}))),
      std::invalid_argument);
}

TEST_CASE("js divergence symmetry and bounds") {
  Rng rng(53);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(8), b(8);
    double sa = 0.0, sb = 0.0;
    for (int i = 0; i < 8; ++i) {
      a[i] = rng.uniform(0.0, 1.0);
      b[i] = rng.uniform(0.0, 1.0);
      sa += a[i];
      sb += b[i];
    }
    for (int i = 0; i < 8; ++i) {
      a[i] /= sa;
      b[i] /= sb;
    }
    auto P = DepthDistribution::from_tensor(Tensor::from({8}, a), 1e-6);
    auto Q = DepthDistribution::from_tensor(Tensor::from({8}, b), 1e-6);
    const double pq = js_divergence(P, Q).item();
    const double qp = js_divergence(Q, P).item();
    CHECK(std::abs(pq - qp) < 1e-12);
    CHECK(pq >= 0.0);
    CHECK(pq <= std::log(2.0) + 1e-12);
  }
}

TEST_CASE("gradient through soft_bin and js divergence") {
  Rng rng(59);
  std::vector<double> ref(32);
  double s = 0.0;
  for (auto& v : ref) {
    v = rng.uniform(0.01, 1.0);
    s += v;
  }
  for (auto& v : ref) v /= s;
  auto P_ref = DepthDistribution::from_tensor(Tensor::from({32}, ref), 1e-6);

  std::vector<double> d(64);
  for (auto& v : d) v = rng.uniform(0.1, 0.9);
  Tensor disp = Tensor::from({8, 8}, d);

  double err = gradcheck(
      [&](const Tensor& t) { return js_divergence(soft_bin(t, BinSpec(32)), P_ref); }, disp);
  CHECK(err < 1e-4);
}
