#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "metaflow/tensor.hpp"

namespace mftest {

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max({1.0, std::abs(got), std::abs(want)});
}

/// Central finite differences of a scalar function w.r.t. one leaf tensor.
/// The function is re-evaluated with perturbed leaf data; no recording.
inline std::vector<double> fd_grad(const std::function<double()>& value,
                                   metaflow::Tensor& leaf, double h = 1e-5) {
  std::vector<double> g(leaf.numel());
  auto& d = leaf.leaf_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double keep = d[i];
    d[i] = keep + h;
    const double fp = value();
    d[i] = keep - h;
    const double fm = value();
    d[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline metaflow::Tensor random_tensor(metaflow::Shape shape, std::mt19937_64& rng,
                                      double lo = -2.0, double hi = 2.0,
                                      bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> d(n);
  for (auto& v : d) v = dist(rng);
  return metaflow::Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

inline double max_rel_err(const std::vector<double>& got,
                          const std::vector<double>& want) {
  double m = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) m = std::max(m, rel_err(got[i], want[i]));
  return m;
}

}  // namespace mftest
