#pragma once

#include <functional>

#include "secdepth/tensor.hpp"

namespace secdepth {

/// Compares reverse-mode gradients of a scalar-valued function against central
/// finite differences. Returns the max over coordinates of
/// |analytic − numeric| / max(1, |numeric|).
inline double gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5) {
  Tape tape;
  Tensor leaf = tape.variable(x);
  Tensor loss = f(leaf);
  if (loss.numel() != 1) {
    throw std::invalid_argument("gradcheck requires a scalar-valued function");
  }
  tape.backward(loss);
  const std::vector<double>& analytic = leaf.grad();

  std::vector<double> probe = x.data();
  double max_err = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(Tensor::from(x.shape(), probe)).item();
    probe[i] = orig - h;
    const double fm = f(Tensor::from(x.shape(), probe)).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    if (err > max_err) max_err = err;
  }
  return max_err;
}

}  // namespace secdepth
