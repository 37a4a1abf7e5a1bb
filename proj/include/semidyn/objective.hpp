#ifndef SEMIDYN_OBJECTIVE_HPP
#define SEMIDYN_OBJECTIVE_HPP

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/dynamics.hpp"
#include "semidyn/parallel.hpp"

namespace semidyn {

/// Trajectories (and optionally sensitivities) of every curve sampled at
/// its measurement times, in (i, l) lexicographic order.
struct ModelEvaluation {
  std::vector<CurveSample> samples;
  std::vector<SensitivityMethod> methods;
  Eigen::VectorXd residuals; // stacked Y - X over (i, l, j)
  int closed_form = 0;
  int variational = 0;
  int left_support = 0;
};

inline std::string curve_label(const Dataset &ds, std::size_t i, std::size_t l) {
  return ds.subjects[i].id + "/" + ds.subjects[i].curves[l].id;
}

/// Solves every curve at `state` and samples it at the measurement times.
inline ModelEvaluation evaluate_model(const Dataset &ds, const ParameterState &state,
                                      const GradientFunction &g, const SolverSettings &settings,
                                      bool with_sensitivities,
                                      SensitivityPreference pref = SensitivityPreference::automatic) {
  check_state(ds, state, g.size());
  const CurveIndex index(ds);
  ModelEvaluation ev;
  ev.samples.resize(index.size());
  ev.methods.assign(index.size(), SensitivityMethod::none);
  std::vector<char> left(index.size(), 0);
  parallel_for(index.size(), settings.threads, [&](std::size_t c) {
    const auto [i, l] = index[c];
    const Curve &curve = ds.subjects[i].curves[l];
    const double a = state.a[i][l];
    const double theta = state.theta[static_cast<Eigen::Index>(i)];
    const std::string label = curve_label(ds, i, l);
    CurveSolution sol = with_sensitivities ? solve_with_sensitivities(g, a, theta, settings, label, pref)
                                           : solve_trajectory(g, a, theta, settings, label);
    ev.samples[c] = sample_curve(sol, g, theta, curve.times);
    ev.methods[c] = sol.method;
    left[c] = sol.left_support ? 1 : 0;
  });
  ev.residuals.resize(static_cast<Eigen::Index>(index.rows()));
  for (std::size_t c = 0; c < index.size(); ++c) {
    const auto [i, l] = index[c];
    const Curve &curve = ds.subjects[i].curves[l];
    for (std::size_t j = 0; j < curve.size(); ++j)
      ev.residuals[static_cast<Eigen::Index>(index.row(c) + j)] = curve.values[j] - ev.samples[c].value[j];
    ev.closed_form += ev.methods[c] == SensitivityMethod::closed_form;
    ev.variational += ev.methods[c] == SensitivityMethod::variational;
    ev.left_support += left[c];
  }
  return ev;
}

/// Residuals Y_ilj - X_il(t_ilj) as a ragged [i][l][j] array.
inline std::vector<std::vector<std::vector<double>>> residuals(const Dataset &ds, const ParameterState &state,
                                                               const GradientFunction &g,
                                                               const SolverSettings &settings = {}) {
  const ModelEvaluation ev = evaluate_model(ds, state, g, settings, false);
  std::vector<std::vector<std::vector<double>>> out(ds.n_subjects());
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < ds.n_subjects(); ++i)
    for (const auto &curve : ds.subjects[i].curves) {
      std::vector<double> r(curve.size());
      for (auto &v : r)
        v = ev.residuals[row++];
      out[i].push_back(std::move(r));
    }
  return out;
}

/// Components of the penalized objective.
struct LossBreakdown {
  double sse = 0.0;
  double pen_a = 0.0;
  double pen_theta = 0.0;
  double pen_beta = 0.0;
  double total = 0.0;
};

/// Objective terms from already computed stacked residuals.
inline LossBreakdown loss_from_residuals(const Eigen::VectorXd &resid, const ParameterState &state,
                                         const PenaltySettings &pen, const Eigen::MatrixXd &B) {
  LossBreakdown out;
  for (Eigen::Index k = 0; k < resid.size(); ++k)
    out.sse += resid[k] * resid[k];
  if (!pen.a_known) {
    for (const auto &row : state.a)
      for (double v : row)
        out.pen_a += (v - state.alpha) * (v - state.alpha);
    out.pen_a *= pen.lambda1;
  }
  for (Eigen::Index i = 0; i < state.theta.size(); ++i)
    out.pen_theta += state.theta[i] * state.theta[i];
  out.pen_theta *= pen.lambda2;
  if (B.size() > 0)
    out.pen_beta = state.beta.dot(B * state.beta);
  out.total = out.sse + out.pen_a + out.pen_theta + out.pen_beta;
  return out;
}

/// sum (Y - X)^2 + lambda1 sum (a - alpha)^2 + lambda2 sum theta^2 + beta^T B beta.
inline LossBreakdown loss(const Dataset &ds, const ParameterState &state, const GradientFunction &g,
                          const PenaltySettings &pen, const PenaltyMatrix &B,
                          const SolverSettings &settings = {}) {
  const ModelEvaluation ev = evaluate_model(ds, state, g, settings, false);
  return loss_from_residuals(ev.residuals, state, pen, B.B);
}

struct VarianceEstimates {
  double sigma_eps2 = 0.0;
  double sigma_a2 = 0.0;
  double sigma_theta2 = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
};

/// Moment estimators of the noise, initial-condition and scale variances,
/// and the implied lambda1 = sigma_eps2 / sigma_a2, lambda2 = sigma_eps2 / sigma_theta2.
///
/// With `a_known` the spread of a does not define lambda1 (reported as 0).
inline VarianceEstimates update_variances(const Dataset &ds, const ParameterState &state,
                                          const Eigen::VectorXd &resid, int M, bool a_known = false) {
  std::vector<std::string> why;
  if (!validate_for_variance(ds, M, &why))
    throw ModelError("adaptive variance estimation refused: " + why.front());
  const auto n = static_cast<double>(ds.n_subjects());
  const auto N = static_cast<double>(ds.n_curves());
  if (n < 2 || N < 2)
    throw ModelError("adaptive variance estimation needs at least 2 subjects and 2 curves");
  const double dof = static_cast<double>(ds.n_measurements()) - N - n - M;

  VarianceEstimates v;
  v.sigma_eps2 = resid.squaredNorm() / dof;
  double alpha = state.mean_a();
  for (const auto &row : state.a)
    for (double a : row)
      v.sigma_a2 += (a - alpha) * (a - alpha);
  v.sigma_a2 /= (N - 1.0);
  v.sigma_theta2 = state.theta.squaredNorm() / (n - 1.0);

  if (!(v.sigma_theta2 > 0.0))
    throw ModelError("adaptive variance estimation: sigma_theta^2 is zero, lambda2 undefined");
  v.lambda2 = v.sigma_eps2 / v.sigma_theta2;
  if (a_known) {
    v.lambda1 = 0.0;
  } else {
    if (!(v.sigma_a2 > 0.0))
      throw ModelError("adaptive variance estimation: sigma_a^2 is zero, lambda1 undefined");
    v.lambda1 = v.sigma_eps2 / v.sigma_a2;
  }
  return v;
}

} // namespace semidyn

#endif // SEMIDYN_OBJECTIVE_HPP
