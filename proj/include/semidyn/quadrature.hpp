#ifndef SEMIDYN_QUADRATURE_HPP
#define SEMIDYN_QUADRATURE_HPP

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "semidyn/error.hpp"

namespace semidyn {

/// Gauss-Legendre nodes and weights on [-1, 1].
struct GaussRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Nodes are found by Newton iteration on P_n starting from the Chebyshev
/// estimate; converges to machine precision for n up to a few hundred.
inline GaussRule gauss_legendre(int n) {
  if (n < 1)
    throw InvalidInput("gauss_legendre: need at least one point");
  GaussRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  const int half = (n + 1) / 2;
  for (int i = 0; i < half; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= n; ++k) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
      const double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16)
        break;
    }
    // recompute derivative at the converged node
    double p0 = 1.0, p1 = 0.0;
    for (int k = 1; k <= n; ++k) {
      const double p2 = p1;
      p1 = p0;
      p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
    }
    dp = n * (z * p0 - p1) / (z * z - 1.0);
    const double w = 2.0 / ((1.0 - z * z) * dp * dp);
    rule.nodes[i] = -z;
    rule.nodes[n - 1 - i] = z;
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  return rule;
}

/// Trapezoid rule on a uniform grid of `panels` panels.
template <class F> double trapezoid(F &&f, double lo, double hi, long panels) {
  if (panels < 1 || !(hi > lo))
    return 0.0;
  const double step = (hi - lo) / static_cast<double>(panels);
  double acc = 0.5 * (f(lo) + f(hi));
  for (long k = 1; k < panels; ++k)
    acc += f(lo + step * static_cast<double>(k));
  return acc * step;
}

} // namespace semidyn

#endif // SEMIDYN_QUADRATURE_HPP
