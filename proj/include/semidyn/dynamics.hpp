#ifndef SEMIDYN_DYNAMICS_HPP
#define SEMIDYN_DYNAMICS_HPP

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "semidyn/basis.hpp"
#include "semidyn/error.hpp"

namespace semidyn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// g(x) = sum_k beta_k phi_k(x).
struct GradientFunction {
  SplineBasis basis;
  Eigen::VectorXd beta;

  GradientFunction() = default;
  GradientFunction(SplineBasis b, Eigen::VectorXd coef) : basis(std::move(b)), beta(std::move(coef)) {
    if (beta.size() != basis.size())
      throw InvalidInput("GradientFunction: coefficient count does not match basis size");
    if (!beta.allFinite())
      throw InvalidInput("GradientFunction: non-finite coefficients");
  }

  int size() const { return basis.size(); }
  double value(double x) const { return basis.combine(beta, x, 0); }
  double derivative(double x) const { return basis.combine(beta, x, 1); }
  std::pair<double, double> value_and_derivative(double x) const {
    return basis.combine_with_derivative(beta, x);
  }
};

/// Anything with a scalar right-hand side x -> g(x).
template <class G>
concept ScalarField = requires(const G &g, double x) {
  { g.value(x) } -> std::convertible_to<double>;
};

struct SolverSettings {
  double h = 5e-4;
  double blowup_bound = 1e6;
  double gradient_floor = 1e-10;
  int threads = 1;
};

enum class SensitivityMethod { none, closed_form, variational };

inline const char *to_string(SensitivityMethod m) {
  switch (m) {
  case SensitivityMethod::closed_form:
    return "closed_form";
  case SensitivityMethod::variational:
    return "variational";
  default:
    return "none";
  }
}

/// Trajectory and (optionally) sensitivities on the uniform grid s_k = k/G.
struct CurveSolution {
  double h = 0.0;
  int steps = 0;
  std::vector<double> x;
  std::vector<double> sens_a;
  std::vector<double> sens_theta;
  RowMatrix sens_beta; // (steps+1) x M
  SensitivityMethod method = SensitivityMethod::none;
  bool left_support = false; // trajectory reached a region where g is identically 0

  double time(int k) const { return static_cast<double>(k) / steps; }
  bool has_sensitivities() const { return method != SensitivityMethod::none; }
};

/// Number of grid steps for spacing h; 1/h must be an integer.
inline int grid_steps(double h) {
  if (!(h > 0.0) || !std::isfinite(h))
    throw InvalidInput("grid spacing h must be positive");
  const double inv = 1.0 / h;
  const double n = std::round(inv);
  if (n < 1.0 || std::abs(inv - n) > 4.0 * n * std::numeric_limits<double>::epsilon())
    throw InvalidInput("grid spacing h must divide [0, 1] into an integer number of steps");
  return static_cast<int>(n);
}

namespace detail {

template <ScalarField G> inline double rk4_step(const G &g, double x, double scale, double h) {
  const double k1 = scale * g.value(x);
  const double k2 = scale * g.value(x + 0.5 * h * k1);
  const double k3 = scale * g.value(x + 0.5 * h * k2);
  const double k4 = scale * g.value(x + h * k3);
  return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline void check_bound(double x, double bound, const std::string &label, double t) {
  if (!std::isfinite(x) || std::abs(x) > bound)
    throw DivergenceError(label, t, std::abs(x));
}

inline double hermite(double y0, double y1, double d0, double d1, double h, double u) {
  const double u2 = u * u, u3 = u2 * u;
  return (2 * u3 - 3 * u2 + 1) * y0 + (u3 - 2 * u2 + u) * h * d0 + (-2 * u3 + 3 * u2) * y1 +
         (u3 - u2) * h * d1;
}

// Grid cell containing t and the local coordinate in [0, 1).
inline std::pair<int, double> locate(double t, int steps) {
  if (!(t >= 0.0 && t <= 1.0))
    throw InvalidInput("evaluation time outside [0, 1]");
  const double pos = t * steps;
  int k = static_cast<int>(std::floor(pos));
  if (k >= steps)
    k = steps - 1;
  return {k, pos - k};
}

} // namespace detail

/// Classical RK4 for X' = e^theta g(X), X(0) = a, on [0, 1].
template <ScalarField G>
CurveSolution solve_trajectory(const G &g, double a, double theta, const SolverSettings &settings = {},
                               const std::string &label = "curve") {
  if (!std::isfinite(a) || !std::isfinite(theta))
    throw InvalidInput("solve_trajectory: non-finite initial condition or scale");
  CurveSolution sol;
  sol.steps = grid_steps(settings.h);
  sol.h = 1.0 / sol.steps;
  sol.x.resize(sol.steps + 1);
  const double scale = std::exp(theta);
  double x = a;
  sol.x[0] = x;
  for (int k = 0; k < sol.steps; ++k) {
    x = detail::rk4_step(g, x, scale, sol.h);
    detail::check_bound(x, settings.blowup_bound, label, sol.time(k + 1));
    sol.x[k + 1] = x;
  }
  if constexpr (std::same_as<G, GradientFunction>) {
    for (double v : sol.x)
      if (!g.basis.contains(v)) {
        sol.left_support = true;
        break;
      }
  }
  return sol;
}

/// Cubic Hermite interpolation of X at arbitrary times using node slopes
/// e^theta g(X(s_k)).
template <ScalarField G>
std::vector<double> eval_at_times(const CurveSolution &sol, const G &g, double theta,
                                  std::span<const double> times) {
  const double scale = std::exp(theta);
  std::vector<double> out;
  out.reserve(times.size());
  for (double t : times) {
    const auto [k, u] = detail::locate(t, sol.steps);
    if (u == 0.0) {
      out.push_back(sol.x[k]);
      continue;
    }
    const double d0 = scale * g.value(sol.x[k]);
    const double d1 = scale * g.value(sol.x[k + 1]);
    out.push_back(detail::hermite(sol.x[k], sol.x[k + 1], d0, d1, sol.h, u));
  }
  return out;
}

namespace detail {

// Adds the integral of phi / g^2 over [a, b] into acc using 3-point
// Gauss-Legendre on each piece between consecutive knots.
inline void integrate_panel(const GradientFunction &g, double a, double b, double *acc) {
  static constexpr double node = 0.7745966692414834; // sqrt(3/5)
  static constexpr double w_end = 5.0 / 9.0, w_mid = 8.0 / 9.0;
  const auto &knots = g.basis.knots();
  const double lo = std::min(a, b), hi = std::max(a, b);
  const double sign = b >= a ? 1.0 : -1.0;
  double from = lo;
  auto it = std::upper_bound(knots.begin(), knots.end(), lo);
  while (from < hi) {
    double to = hi;
    if (it != knots.end() && *it < hi)
      to = *it++;
    const double half = 0.5 * (to - from), mid = 0.5 * (to + from);
    const double xs[3] = {mid - half * node, mid, mid + half * node};
    const double ws[3] = {w_end, w_mid, w_end};
    for (int q = 0; q < 3; ++q) {
      const auto loc = g.basis.local(xs[q], 0);
      double gx = 0.0;
      for (int r = 0; r < loc.count; ++r)
        gx += g.beta[loc.first + r] * loc.values[r];
      const double f = sign * half * ws[q] / (gx * gx);
      for (int r = 0; r < loc.count; ++r)
        acc[loc.first + r] += f * loc.values[r];
    }
    from = to;
  }
}

} // namespace detail

/// Closed-form sensitivities
///   dX/da     = g(X(t)) / g(X(0)),
///   dX/dtheta = e^theta t g(X(t)),
///   dX/dbeta_r = g(X(t)) int_{X(0)}^{X(t)} phi_r(x) / g(x)^2 dx.
///
/// Requires |g| > gradient_floor with constant sign along the trajectory and
/// a strictly monotone grid trajectory. Returns false (leaving `sol`
/// untouched) when that does not hold.
inline bool sensitivities_closed_form(CurveSolution &sol, const GradientFunction &g, double theta,
                                      const SolverSettings &settings = {}) {
  const int G = sol.steps;
  const int M = g.size();
  std::vector<double> gx(G + 1);
  for (int k = 0; k <= G; ++k) {
    gx[k] = g.value(sol.x[k]);
    if (!(std::abs(gx[k]) > settings.gradient_floor))
      return false;
    if ((gx[k] > 0.0) != (gx[0] > 0.0))
      return false;
    if (k > 0 && !((sol.x[k] - sol.x[k - 1]) * gx[0] > 0.0))
      return false;
  }

  const double scale = std::exp(theta);
  std::vector<double> sa(G + 1), st(G + 1);
  RowMatrix sb(G + 1, M);
  std::vector<double> integral(M, 0.0);
  for (int k = 0; k <= G; ++k) {
    sa[k] = gx[k] / gx[0];
    st[k] = scale * sol.time(k) * gx[k];
    if (k > 0)
      detail::integrate_panel(g, sol.x[k - 1], sol.x[k], integral.data());
    for (int r = 0; r < M; ++r)
      sb(k, r) = gx[k] * integral[r];
  }
  sol.sens_a = std::move(sa);
  sol.sens_theta = std::move(st);
  sol.sens_beta = std::move(sb);
  sol.method = SensitivityMethod::closed_form;
  return true;
}

/// RK4 integration of the variational equations
///   d/dt S_a     = S_a e^theta g'(X),                      S_a(0) = 1
///   d/dt S_theta = S_theta e^theta g'(X) + e^theta g(X),   S_theta(0) = 0
///   d/dt S_beta_r = S_beta_r e^theta g'(X) + e^theta phi_r(X), S_beta_r(0) = 0
/// with the stage values of X rebuilt from the stored grid trajectory.
inline void sensitivities_variational(CurveSolution &sol, const GradientFunction &g, double theta,
                                      const SolverSettings &settings = {},
                                      const std::string &label = "curve") {
  const int G = sol.steps;
  const int M = g.size();
  const int dim = 2 + M;
  const double h = sol.h;
  const double scale = std::exp(theta);

  struct Stage {
    double coef = 0.0;           // e^theta g'(X)
    double gval = 0.0;           // g(X)
    SplineBasis::Local phi;
  };
  auto stage_at = [&](double x) {
    Stage st;
    st.phi = g.basis.local(x, 0);
    const auto [v, d] = g.value_and_derivative(x);
    st.gval = v;
    st.coef = scale * d;
    return st;
  };
  // f(y) for the affine variational system at one stage
  auto rhs = [&](const Stage &st, const std::vector<double> &y, std::vector<double> &out) {
    for (int r = 0; r < dim; ++r)
      out[r] = st.coef * y[r];
    out[1] += scale * st.gval;
    for (int r = 0; r < st.phi.count; ++r)
      out[2 + st.phi.first + r] += scale * st.phi.values[r];
  };

  std::vector<double> y(dim, 0.0), tmp(dim), k1(dim), k2(dim), k3(dim), k4(dim);
  y[0] = 1.0;
  std::vector<double> sa(G + 1), st(G + 1);
  RowMatrix sb(G + 1, M);
  auto store = [&](int k) {
    sa[k] = y[0];
    st[k] = y[1];
    for (int r = 0; r < M; ++r)
      sb(k, r) = y[2 + r];
  };
  store(0);
  for (int k = 0; k < G; ++k) {
    const double x0 = sol.x[k];
    const Stage s1 = stage_at(x0);
    const double x2 = x0 + 0.5 * h * (scale * s1.gval);
    const Stage s2 = stage_at(x2);
    const double x3 = x0 + 0.5 * h * (scale * s2.gval);
    const Stage s3 = stage_at(x3);
    const double x4 = x0 + h * (scale * s3.gval);
    const Stage s4 = stage_at(x4);

    rhs(s1, y, k1);
    for (int r = 0; r < dim; ++r)
      tmp[r] = y[r] + 0.5 * h * k1[r];
    rhs(s2, tmp, k2);
    for (int r = 0; r < dim; ++r)
      tmp[r] = y[r] + 0.5 * h * k2[r];
    rhs(s3, tmp, k3);
    for (int r = 0; r < dim; ++r)
      tmp[r] = y[r] + h * k3[r];
    rhs(s4, tmp, k4);
    for (int r = 0; r < dim; ++r) {
      y[r] += h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
      detail::check_bound(y[r], settings.blowup_bound, label, sol.time(k + 1));
    }
    store(k + 1);
  }
  sol.sens_a = std::move(sa);
  sol.sens_theta = std::move(st);
  sol.sens_beta = std::move(sb);
  sol.method = SensitivityMethod::variational;
}

enum class SensitivityPreference { automatic, closed_form, variational };

/// Trajectory plus sensitivities; closed form when its precondition holds,
/// otherwise the variational equations.
inline CurveSolution solve_with_sensitivities(const GradientFunction &g, double a, double theta,
                                              const SolverSettings &settings = {},
                                              const std::string &label = "curve",
                                              SensitivityPreference pref = SensitivityPreference::automatic) {
  CurveSolution sol = solve_trajectory(g, a, theta, settings, label);
  if (pref != SensitivityPreference::variational && sensitivities_closed_form(sol, g, theta, settings))
    return sol;
  if (pref == SensitivityPreference::closed_form)
    throw ModelError("closed-form sensitivities unavailable for curve '" + label + "'");
  sensitivities_variational(sol, g, theta, settings, label);
  return sol;
}

/// Trajectory value and sensitivities interpolated to measurement times.
struct CurveSample {
  std::vector<double> value;
  std::vector<double> d_a;
  std::vector<double> d_theta;
  RowMatrix d_beta; // m x M
};

/// Hermite interpolation of the trajectory and its sensitivities; node
/// slopes of the sensitivities come from the right-hand sides of the
/// variational equations.
inline CurveSample sample_curve(const CurveSolution &sol, const GradientFunction &g, double theta,
                                std::span<const double> times) {
  const int M = g.size();
  const int m = static_cast<int>(times.size());
  const double scale = std::exp(theta);
  const bool sens = sol.has_sensitivities();
  CurveSample out;
  out.value.resize(m);
  if (sens) {
    out.d_a.resize(m);
    out.d_theta.resize(m);
    out.d_beta.resize(m, M);
  }
  std::vector<double> db0(M), db1(M);
  for (int j = 0; j < m; ++j) {
    const auto [k, u] = detail::locate(times[j], sol.steps);
    if (u == 0.0) {
      out.value[j] = sol.x[k];
      if (sens) {
        out.d_a[j] = sol.sens_a[k];
        out.d_theta[j] = sol.sens_theta[k];
        out.d_beta.row(j) = sol.sens_beta.row(k);
      }
      continue;
    }
    const auto [g0, gp0] = g.value_and_derivative(sol.x[k]);
    const auto [g1, gp1] = g.value_and_derivative(sol.x[k + 1]);
    out.value[j] = detail::hermite(sol.x[k], sol.x[k + 1], scale * g0, scale * g1, sol.h, u);
    if (!sens)
      continue;
    const double c0 = scale * gp0, c1 = scale * gp1;
    out.d_a[j] = detail::hermite(sol.sens_a[k], sol.sens_a[k + 1], c0 * sol.sens_a[k],
                                 c1 * sol.sens_a[k + 1], sol.h, u);
    out.d_theta[j] =
        detail::hermite(sol.sens_theta[k], sol.sens_theta[k + 1], c0 * sol.sens_theta[k] + scale * g0,
                        c1 * sol.sens_theta[k + 1] + scale * g1, sol.h, u);
    const auto phi0 = g.basis.local(sol.x[k], 0);
    const auto phi1 = g.basis.local(sol.x[k + 1], 0);
    for (int r = 0; r < M; ++r) {
      db0[r] = c0 * sol.sens_beta(k, r);
      db1[r] = c1 * sol.sens_beta(k + 1, r);
    }
    for (int r = 0; r < phi0.count; ++r)
      db0[phi0.first + r] += scale * phi0.values[r];
    for (int r = 0; r < phi1.count; ++r)
      db1[phi1.first + r] += scale * phi1.values[r];
    for (int r = 0; r < M; ++r)
      out.d_beta(j, r) =
          detail::hermite(sol.sens_beta(k, r), sol.sens_beta(k + 1, r), db0[r], db1[r], sol.h, u);
  }
  return out;
}

} // namespace semidyn

#endif // SEMIDYN_DYNAMICS_HPP
