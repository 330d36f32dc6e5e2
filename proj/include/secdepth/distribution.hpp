#pragma once

#include "secdepth/tensor.hpp"

namespace secdepth {

/// Equal-width binning of the disparity range [0,1]: centers at (n+0.5)/N and
/// a Gaussian assignment kernel whose sigma is half the bin width.
struct BinSpec {
  std::size_t bins;

  explicit BinSpec(std::size_t n = 32) : bins(n) {
    if (n == 0) throw std::invalid_argument("bin count must be positive");
  }

  double center(std::size_t n) const {
    return (static_cast<double>(n) + 0.5) / static_cast<double>(bins);
  }

  double sigma() const { return 1.0 / (2.0 * static_cast<double>(bins)); }
};

struct DepthDistribution {
  Tensor p;  // length-N probabilities

  static DepthDistribution from_tensor(const Tensor& t, double tol = 1e-9) {
    if (t.shape().size() != 1) {
      throw std::invalid_argument("distribution must be a rank-1 tensor");
    }
    double total = 0.0;
    for (double v : t.data()) {
      if (v < 0.0) throw std::invalid_argument("distribution has a negative entry");
      total += v;
    }
    if (std::abs(total - 1.0) > tol) {
      throw std::invalid_argument("distribution sums to " + std::to_string(total));
    }
    return {t};
  }

  std::size_t bins() const { return p.numel(); }
};

/// Converts a disparity map into a length-N probability vector: every pixel
/// contributes a Gaussian weight to every bin, weights are pooled over pixels
/// and the pooled vector is normalized to sum 1. Differentiable w.r.t. the map.
inline DepthDistribution soft_bin(const Tensor& disparity, const BinSpec& spec) {
  if (disparity.numel() == 0) throw std::invalid_argument("soft_bin: empty disparity map");
  const std::size_t n_bins = spec.bins;
  const std::size_t n_px = disparity.numel();
  const double sigma = spec.sigma();
  const double norm = 1.0 / (sigma * std::sqrt(2.0 * 3.14159265358979323846));
  const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);

  const auto& d = disparity.data();
  std::vector<double> pooled(n_bins, 0.0);
  std::vector<double> weights(n_px * n_bins);
  for (std::size_t p = 0; p < n_px; ++p) {
    for (std::size_t n = 0; n < n_bins; ++n) {
      const double diff = d[p] - spec.center(n);
      const double w = norm * std::exp(-diff * diff * inv_two_sigma2);
      weights[p * n_bins + n] = w;
      pooled[n] += w;
    }
  }
  double total = 0.0;
  for (double v : pooled) total += v;
  if (total <= 0.0) throw std::domain_error("soft_bin: zero aggregate weight");
  std::vector<double> probs(n_bins);
  for (std::size_t n = 0; n < n_bins; ++n) probs[n] = pooled[n] / total;

  auto disp = disparity;
  Tensor t = make_op_result(
      {n_bins}, std::move(probs), "soft_bin", {&disparity},
      [disp, spec, n_bins, n_px, total, inv_two_sigma2, weights = std::move(weights),
       pooled = std::move(pooled)](const double* adj, Tape& tape,
                                   const std::vector<std::int64_t>& in) {
        if (in[0] < 0) return;
        // p_n = s_n / S with S = Σ s_m:
        //   dL/ds_n = (g_n − Σ_m g_m p_m) / S,  ds_n/dd = w_n · (c_n − d) / σ²
        double g_dot_p = 0.0;
        for (std::size_t n = 0; n < n_bins; ++n) g_dot_p += adj[n] * (pooled[n] / total);
        std::vector<double> ds(n_bins);
        for (std::size_t n = 0; n < n_bins; ++n) ds[n] = (adj[n] - g_dot_p) / total;
        double* gd = tape.adjoint_for(in[0], n_px);
        const auto& d = disp.data();
        for (std::size_t p = 0; p < n_px; ++p) {
          double acc = 0.0;
          for (std::size_t n = 0; n < n_bins; ++n) {
            const double diff = d[p] - spec.center(n);
            acc += ds[n] * weights[p * n_bins + n] * (-diff) * 2.0 * inv_two_sigma2;
          }
          gd[p] += acc;
        }
      });
  return {t};
}

/// Jensen–Shannon divergence in nats: ½·KL(P‖M) + ½·KL(Q‖M) with M = (P+Q)/2.
/// Zero-probability entries contribute zero. Differentiable w.r.t. both
/// arguments; bounded by ln 2.
inline Tensor js_divergence(const DepthDistribution& p_dist, const DepthDistribution& q_dist) {
  const Tensor& p = p_dist.p;
  const Tensor& q = q_dist.p;
  if (p.numel() != q.numel()) {
    throw std::invalid_argument("js_divergence: length mismatch " + std::to_string(p.numel()) +
                                " vs " + std::to_string(q.numel()));
  }
  const std::size_t n = p.numel();
  const auto& pd = p.data();
  const auto& qd = q.data();
  double js = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = 0.5 * (pd[i] + qd[i]);
    if (pd[i] > 0.0) js += 0.5 * pd[i] * std::log(pd[i] / m);
    if (qd[i] > 0.0) js += 0.5 * qd[i] * std::log(qd[i] / m);
  }
  if (js < 0.0) js = 0.0;  // guard against rounding at P == Q

  auto pt = p;
  auto qt = q;
  return make_op_result({}, {js}, "js_divergence", {&p, &q},
                        [pt, qt, n](const double* adj, Tape& tape,
                                    const std::vector<std::int64_t>& in) {
                          // dJS/dp_i = ½·ln(p_i/m_i); the q gradient is symmetric.
                          const auto& pd = pt.data();
                          const auto& qd = qt.data();
                          for (int arg = 0; arg < 2; ++arg) {
                            if (in[arg] < 0) continue;
                            double* g = tape.adjoint_for(in[arg], n);
                            const auto& own = arg == 0 ? pd : qd;
                            for (std::size_t i = 0; i < n; ++i) {
                              const double m = 0.5 * (pd[i] + qd[i]);
                              if (own[i] > 0.0 && m > 0.0) {
                                g[i] += adj[0] * 0.5 * std::log(own[i] / m);
                              }
                            }
                          }
                        });
}

}  // namespace secdepth
