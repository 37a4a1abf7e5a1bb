// Simulates a small data set, fits the gradient function and prints the
// estimate next to the truth with pointwise standard errors.

#include <cstdio>

#include "semidyn/semidyn.hpp"

using namespace semidyn;

int main() {
  SimDesign design = default_design(Regime::moderate);
  design.n = 6;
  design.N = 8;
  const Simulated sim = generate(design, 7);

  ParameterState start = sim.truth.state();
  start.beta = Eigen::VectorXd::Ones(design.basis.size());
  start.theta.setZero();
  PenaltySettings pen;
  pen.a_known = true;
  const FitResult res =
      fit(sim.data, design.basis, PenaltyMatrix::zero(design.basis.size()), pen, FitOptions{}, start);

  std::printf("converged: %s after %d LM sweeps, %d Newton steps\n", res.converged ? "yes" : "no", res.n_lm,
              res.n_nr);
  const GradientFunction g_hat(design.basis, res.state.beta);
  const GradientFunction g_true(design.basis, design.beta * std::exp(sim.truth.theta.mean()));
  const auto xs = linspace(0.25, 1.0, 7);
  std::vector<double> se(xs.size(), 0.0);
  if (res.Wn.size() > 0 && res.variances_estimated)
    se = se_g(res.Wn, res.variances.sigma_eps2, design.basis, xs);
  std::printf("%6s %10s %10s %10s\n", "x", "g_hat", "g_true", "se");
  for (std::size_t k = 0; k < xs.size(); ++k)
    std::printf("%6.3f %10.5f %10.5f %10.5f\n", xs[k], g_hat.value(xs[k]), g_true.value(xs[k]), se[k]);
}
