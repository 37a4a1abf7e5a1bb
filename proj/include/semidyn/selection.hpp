#ifndef SEMIDYN_SELECTION_HPP
#define SEMIDYN_SELECTION_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/dynamics.hpp"
#include "semidyn/jacobian.hpp"
#include "semidyn/optimizer.hpp"
#include "semidyn/parallel.hpp"

namespace semidyn {

struct CurveContribution {
  std::size_t subject = 0;
  std::size_t curve = 0;
  double value = 0.0;
  bool ok = true; // false: correction degraded or refit failed
};

struct CVReport {
  double score = 0.0;
  std::vector<CurveContribution> per_curve;
  int degraded = 0; // curves whose correction or refit fell back
  bool converged = true;
  std::vector<std::string> warnings;
};

namespace detail {

/// Prediction loss of one curve at (theta, beta) after fitting its initial
/// value by damped Gauss-Newton on sum (Y - X)^2 + lambda1 (a - alpha)^2.
/// dX/da is taken from g(X(t)) / g(a), or exp(e^theta g'(a) t) at a root of g.
inline double curve_prediction_loss(const Curve &curve, double a0, double alpha, double lambda1, bool fit_a,
                                    double theta, const GradientFunction &g, const SolverSettings &settings,
                                    const std::string &label, int max_iter = 10, double tol = 1e-8) {
  const double scale = std::exp(theta);
  const Eigen::Map<const Eigen::VectorXd> y(curve.values.data(), static_cast<Eigen::Index>(curve.size()));
  auto objective = [&](double a, Eigen::VectorXd *eps, Eigen::VectorXd *jac) {
    const CurveSolution sol = solve_trajectory(g, a, theta, settings, label);
    const std::vector<double> x = eval_at_times(sol, g, theta, curve.times);
    Eigen::VectorXd e = y - Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    if (jac) {
      jac->resize(e.size());
      const auto [ga, gpa] = g.value_and_derivative(a);
      for (Eigen::Index j = 0; j < e.size(); ++j)
        (*jac)[j] = std::abs(ga) > settings.gradient_floor ? g.value(x[static_cast<std::size_t>(j)]) / ga
                                                           : std::exp(scale * gpa * curve.times[static_cast<std::size_t>(j)]);
    }
    const double sse = e.squaredNorm();
    if (eps)
      *eps = std::move(e);
    return sse;
  };
  double a = a0;
  Eigen::VectorXd eps, jac;
  double sse = objective(a, &eps, &jac);
  if (!fit_a)
    return sse;
  double f = sse + lambda1 * (a - alpha) * (a - alpha);
  for (int it = 0; it < max_iter; ++it) {
    const double denom = jac.squaredNorm() + lambda1;
    if (!(denom > 0.0))
      break;
    const double delta = (jac.dot(eps) - lambda1 * (a - alpha)) / denom;
    double s = 1.0;
    bool moved = false;
    for (int half = 0; half < 20; ++half, s *= 0.5) {
      const double trial = a + s * delta;
      double sse_t;
      try {
        sse_t = objective(trial, nullptr, nullptr);
      } catch (const DivergenceError &) {
        continue;
      }
      const double f_t = sse_t + lambda1 * (trial - alpha) * (trial - alpha);
      if (f_t <= f) {
        a = trial;
        f = f_t;
        moved = true;
        break;
      }
    }
    if (!moved || std::abs(s * delta) < tol * (1.0 + std::abs(a)))
      break;
    sse = objective(a, &eps, &jac);
  }
  return objective(a, nullptr, nullptr);
}

} // namespace detail

/// Approximate leave-one-curve-out score: first-order corrections of theta_i
/// and beta from the Gauss-Newton Hessians at the fit, then a refitted
/// initial value per curve.
inline CVReport approx_cv(const Dataset &ds, const FitResult &fit, const SplineBasis &basis, const PenaltyMatrix &B,
                          const SolverSettings &settings = {}) {
  const ParameterState &st = fit.state;
  const PenaltySettings &pen = fit.penalties;
  const GradientFunction g_hat(basis, st.beta);
  const JacobianBlocks jb = assemble_jacobians(ds, st, g_hat, settings);
  const CurveIndex &index = jb.index;

  CVReport rep;
  rep.converged = fit.converged;
  rep.per_curve.resize(index.size());
  if (index.size() == 1) {
    rep.warnings.push_back("single curve: leave-one-out undefined, reporting the in-sample loss");
    rep.per_curve[0] = {0, 0, jb.eps.squaredNorm(), false};
    rep.score = rep.per_curve[0].value;
    rep.degraded = 1;
    return rep;
  }

  Eigen::MatrixXd H_beta = 2.0 * (jb.J_beta.transpose() * jb.J_beta);
  if (B.B.size() > 0)
    H_beta += 2.0 * B.B;
  const Eigen::LDLT<Eigen::MatrixXd> beta_solver(H_beta);
  const bool beta_ok = beta_solver.info() == Eigen::Success && beta_solver.isPositive() &&
                       beta_solver.vectorD().minCoeff() > 1e-14 * beta_solver.vectorD().cwiseAbs().maxCoeff();

  std::vector<char> degraded(index.size(), 0);
  parallel_for(index.size(), settings.threads, [&](std::size_t c) {
    const auto [i, l] = index[c];
    const auto r0 = static_cast<Eigen::Index>(index.row(c));
    const auto m = jb.J_a[c].size();
    const Eigen::VectorXd eps = jb.eps.segment(r0, m);

    const Eigen::VectorXd &Jt = jb.J_theta[i];
    const double h_theta = 2.0 * Jt.squaredNorm() + 2.0 * pen.lambda2;
    const Eigen::VectorXd Jt_c = Jt.segment(r0 - jb.subject_row[i], m);
    double theta = st.theta[static_cast<Eigen::Index>(i)];
    if (h_theta > 0.0)
      theta += -2.0 * eps.dot(Jt_c) / h_theta;
    else
      degraded[c] = 1;

    Eigen::VectorXd beta = st.beta;
    if (beta_ok)
      beta += beta_solver.solve(-2.0 * jb.J_beta.middleRows(r0, m).transpose() * eps);
    else
      degraded[c] = 1;

    const Curve &curve = ds.subjects[i].curves[l];
    const std::string label = curve_label(ds, i, l);
    double value;
    try {
      value = detail::curve_prediction_loss(curve, st.a[i][l], st.alpha, pen.lambda1, !pen.a_known, theta,
                                            GradientFunction(basis, beta), settings, label);
    } catch (const DivergenceError &) {
      degraded[c] = 1;
      value = detail::curve_prediction_loss(curve, st.a[i][l], st.alpha, pen.lambda1, !pen.a_known,
                                            st.theta[static_cast<Eigen::Index>(i)], g_hat, settings, label);
    }
    rep.per_curve[c] = {i, l, value, degraded[c] == 0};
  });
  for (const auto &pc : rep.per_curve) {
    rep.score += pc.value;
    rep.degraded += pc.ok ? 0 : 1;
  }
  if (rep.degraded)
    rep.warnings.push_back(std::to_string(rep.degraded) + " curve corrections degraded to the full-data estimates");
  return rep;
}

/// Dataset with curve (i, l) removed; a subject left without curves is
/// removed as well. `kept` maps new subject positions to old ones.
inline Dataset drop_curve(const Dataset &ds, std::size_t i, std::size_t l, std::vector<std::size_t> *kept = nullptr) {
  Dataset out;
  out.time_map = ds.time_map;
  if (kept)
    kept->clear();
  for (std::size_t s = 0; s < ds.n_subjects(); ++s) {
    Subject sub = ds.subjects[s];
    if (s == i)
      sub.curves.erase(sub.curves.begin() + static_cast<std::ptrdiff_t>(l));
    if (sub.curves.empty())
      continue;
    if (kept)
      kept->push_back(s);
    out.subjects.push_back(std::move(sub));
  }
  return out;
}

struct ExactCVOptions {
  std::size_t max_measurements = 500;
  bool warm_start = true; // start each refit from the full-data estimates
};

/// Exact leave-one-curve-out score by refitting without each curve. The
/// penalties are those of `full` (held fixed in the refits) and the initial
/// value of the left-out curve is refitted against the full-data alpha.
inline CVReport exact_cv(const Dataset &ds, const FitResult &full, const SplineBasis &basis, const PenaltyMatrix &B,
                         FitOptions opts, const ExactCVOptions &cv = {}) {
  if (ds.n_measurements() > cv.max_measurements)
    throw InvalidInput("exact_cv: dataset has " + std::to_string(ds.n_measurements()) +
                       " measurements, above the limit of " + std::to_string(cv.max_measurements));
  const CurveIndex index(ds);
  PenaltySettings pen = full.penalties;
  pen.adaptive = false;
  opts.adaptive_lm = false;
  opts.adaptive_nr = false;
  const int threads = opts.solver.threads;
  opts.solver.threads = 1;

  CVReport rep;
  rep.per_curve.resize(index.size());
  parallel_for(index.size(), threads, [&](std::size_t c) {
    const auto [i, l] = index[c];
    std::vector<std::size_t> kept;
    const Dataset sub = drop_curve(ds, i, l, &kept);
    CurveContribution out{i, l, 0.0, true};
    double theta = 0.0;
    Eigen::VectorXd beta = full.state.beta;
    if (sub.subjects.empty()) {
      out.ok = false;
    } else {
      ParameterState init;
      init.beta = full.state.beta;
      init.theta.resize(static_cast<Eigen::Index>(kept.size()));
      for (std::size_t s = 0; s < kept.size(); ++s) {
        init.theta[static_cast<Eigen::Index>(s)] = full.state.theta[static_cast<Eigen::Index>(kept[s])];
        std::vector<double> row = full.state.a[kept[s]];
        if (kept[s] == i)
          row.erase(row.begin() + static_cast<std::ptrdiff_t>(l));
        init.a.push_back(std::move(row));
      }
      init.alpha = init.mean_a();
      if (!cv.warm_start && !pen.a_known) {
        const ParameterState fresh = initial_state(sub, basis.size());
        init = fresh;
      }
      try {
        const FitResult r = fit(sub, basis, B, pen, opts, init);
        out.ok = r.converged;
        beta = r.state.beta;
        const auto pos = std::find(kept.begin(), kept.end(), i);
        if (pos != kept.end())
          theta = r.state.theta[pos - kept.begin()];
      } catch (const ModelError &) {
        out.ok = false;
      }
    }
    const Curve &curve = ds.subjects[i].curves[l];
    try {
      out.value = detail::curve_prediction_loss(curve, full.state.a[i][l], full.state.alpha, pen.lambda1,
                                                !pen.a_known, theta, GradientFunction(basis, beta), opts.solver,
                                                curve_label(ds, i, l));
    } catch (const DivergenceError &) {
      out.ok = false;
      out.value = std::numeric_limits<double>::quiet_NaN();
    }
    rep.per_curve[c] = out;
  });
  for (const auto &pc : rep.per_curve) {
    if (pc.ok)
      rep.score += pc.value;
    else
      ++rep.degraded;
  }
  rep.converged = rep.degraded == 0;
  if (rep.degraded)
    rep.warnings.push_back(std::to_string(rep.degraded) + " refits failed or did not converge; score sums the rest");
  return rep;
}

struct Candidate {
  SplineBasis basis;
  double A = 0.5;
  double lambda_R = 0.0;
  std::string name;
};

struct RankedCandidate {
  Candidate candidate;
  FitResult fit;
  CVReport cv;
  bool failed = false; // fitting threw
  std::string error;
  std::size_t position = 0; // order in the input list
};

/// Fits every candidate, scores by approximate CV and ranks ascending;
/// non-converged and failed candidates go last, in input order.
inline std::vector<RankedCandidate> select_model(const Dataset &ds, const std::vector<Candidate> &candidates,
                                                 const PenaltySettings &pen, const FitOptions &opts,
                                                 const std::function<ParameterState(const SplineBasis &)> &init = {},
                                                 int threads = 1) {
  if (candidates.empty())
    throw InvalidInput("select_model: no candidates");
  std::vector<RankedCandidate> out(candidates.size());
  FitOptions inner = opts;
  if (threads > 1)
    inner.solver.threads = 1;
  parallel_for(candidates.size(), threads, [&](std::size_t k) {
    RankedCandidate &rc = out[k];
    rc.candidate = candidates[k];
    rc.position = k;
    try {
      const PenaltyMatrix B = build_flatness_penalty(rc.candidate.basis, rc.candidate.A, rc.candidate.lambda_R);
      std::optional<ParameterState> start;
      if (init)
        start = init(rc.candidate.basis);
      rc.fit = fit(ds, rc.candidate.basis, B, pen, inner, start);
      rc.cv = approx_cv(ds, rc.fit, rc.candidate.basis, B, inner.solver);
    } catch (const ModelError &e) {
      rc.failed = true;
      rc.error = e.what();
    }
  });
  const bool any = std::any_of(out.begin(), out.end(), [](const auto &r) { return !r.failed && r.fit.converged; });
  if (!any)
    throw ModelError("select_model: no candidate converged");
  std::stable_sort(out.begin(), out.end(), [](const RankedCandidate &x, const RankedCandidate &y) {
    const bool gx = !x.failed && x.fit.converged, gy = !y.failed && y.fit.converged;
    if (gx != gy)
      return gx;
    if (!gx)
      return false;
    return x.cv.score < y.cv.score;
  });
  return out;
}

enum class Criterion { aic, bic };

/// Crude derivative regression: x^2, x^3 (plus 1, x on request) and the
/// selected truncated cubics (x - k)_+^3.
struct StepwiseResult {
  std::vector<double> knots;
  Eigen::VectorXd coef;
  bool with_linear = false;
  double criterion = 0.0;
  double rss = 0.0;
  std::size_t points = 0;

  double value(double x) const {
    double v = 0.0;
    Eigen::Index k = 0;
    if (with_linear) {
      v += coef[k++];
      v += coef[k++] * x;
    }
    v += coef[k++] * x * x;
    v += coef[k++] * x * x * x;
    for (double knot : knots) {
      const double d = std::max(0.0, x - knot);
      v += coef[k++] * d * d * d;
    }
    return v;
  }
};

namespace detail {

inline double information_criterion(double rss, double scale, std::size_t m, std::size_t p, Criterion c) {
  const double md = static_cast<double>(m);
  const double floor = 1e-24 * std::max(scale, 1e-300);
  const double fit = md * std::log(std::max(rss, floor) / md);
  return fit + (c == Criterion::aic ? 2.0 : std::log(md)) * static_cast<double>(p);
}

inline double least_squares_rss(const Eigen::MatrixXd &X, const Eigen::VectorXd &y, Eigen::VectorXd *coef) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < X.cols())
    return std::numeric_limits<double>::infinity();
  Eigen::VectorXd b = qr.solve(y);
  const double rss = (y - X * b).squaredNorm();
  if (coef)
    *coef = std::move(b);
  return rss;
}

} // namespace detail

/// Forward stepwise choice of knots for the rescaled divided differences
/// e^{-theta_i} (Y_{j+1} - Y_j) / (t_{j+1} - t_j) against midpoints
/// (Y_{j+1} + Y_j) / 2.
inline StepwiseResult stepwise_knot_candidates(const Dataset &ds, const Eigen::VectorXd &theta0,
                                               const std::vector<double> &candidate_knots, Criterion criterion,
                                               bool with_linear = false) {
  if (theta0.size() != static_cast<Eigen::Index>(ds.n_subjects()))
    throw InvalidInput("stepwise: theta0 has the wrong length");
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    const double scale = std::exp(-theta0[static_cast<Eigen::Index>(i)]);
    for (const auto &c : ds.subjects[i].curves) {
      if (c.size() < 2)
        throw InvalidInput("stepwise: every curve needs at least 2 measurements");
      for (std::size_t j = 0; j + 1 < c.size(); ++j) {
        xs.push_back(0.5 * (c.values[j + 1] + c.values[j]));
        ys.push_back(scale * (c.values[j + 1] - c.values[j]) / (c.times[j + 1] - c.times[j]));
      }
    }
  }
  const std::size_t m = xs.size();
  std::vector<double> distinct = xs;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  const std::size_t base = with_linear ? 4 : 2;
  if (distinct.size() < base + 1)
    throw InvalidInput("stepwise: fewer distinct abscissas than parameters");

  const Eigen::Map<const Eigen::VectorXd> y(ys.data(), static_cast<Eigen::Index>(m));
  auto column = [&](int kind, double knot) {
    Eigen::VectorXd col(static_cast<Eigen::Index>(m));
    for (std::size_t k = 0; k < m; ++k) {
      const double x = xs[k];
      const double d = std::max(0.0, x - knot);
      col[static_cast<Eigen::Index>(k)] = kind == 0 ? 1.0 : kind == 1 ? x : kind == 2 ? x * x : kind == 3 ? x * x * x : d * d * d;
    }
    return col;
  };
  Eigen::MatrixXd X(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(base));
  {
    Eigen::Index k = 0;
    for (int kind = with_linear ? 0 : 2; kind <= 3; ++kind)
      X.col(k++) = column(kind, 0.0);
  }
  const double scale = y.squaredNorm();
  StepwiseResult res;
  res.with_linear = with_linear;
  res.points = m;
  res.rss = detail::least_squares_rss(X, y, &res.coef);
  res.criterion = detail::information_criterion(res.rss, scale, m, base, criterion);

  std::vector<double> pool = candidate_knots;
  while (!pool.empty() && static_cast<std::size_t>(X.cols()) + 1 < distinct.size()) {
    double best = res.criterion;
    std::size_t pick = pool.size();
    Eigen::VectorXd best_coef;
    double best_rss = 0.0;
    for (std::size_t q = 0; q < pool.size(); ++q) {
      Eigen::MatrixXd Xt(X.rows(), X.cols() + 1);
      Xt << X, column(4, pool[q]);
      Eigen::VectorXd coef;
      const double rss = detail::least_squares_rss(Xt, y, &coef);
      const double ic = detail::information_criterion(rss, scale, m, static_cast<std::size_t>(Xt.cols()), criterion);
      if (ic < best) {
        best = ic;
        pick = q;
        best_coef = coef;
        best_rss = rss;
      }
    }
    if (pick == pool.size())
      break;
    Eigen::MatrixXd Xt(X.rows(), X.cols() + 1);
    Xt << X, column(4, pool[pick]);
    X = std::move(Xt);
    res.knots.push_back(pool[pick]);
    res.coef = best_coef;
    res.rss = best_rss;
    res.criterion = best;
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return res;
}

} // namespace semidyn

#endif // SEMIDYN_SELECTION_HPP
