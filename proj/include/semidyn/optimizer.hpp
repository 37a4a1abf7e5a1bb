#ifndef SEMIDYN_OPTIMIZER_HPP
#define SEMIDYN_OPTIMIZER_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/dynamics.hpp"
#include "semidyn/inference.hpp"
#include "semidyn/jacobian.hpp"
#include "semidyn/objective.hpp"

namespace semidyn {

struct FitOptions {
  int max_lm_iters = 200;
  int max_nr_iters = 5;
  double tol_rel_obj = 1e-8;
  double tol_param = 1e-6;
  double lm_handoff_rel = 1e-2; // relative sweep improvement below which NR takes over
  bool adaptive_lm = false;
  bool adaptive_nr = true;
  bool newton = true;
  SolverSettings solver;
};

inline void check_options(const FitOptions &o) {
  if (o.max_lm_iters < 1 || o.max_nr_iters < 0)
    throw InvalidInput("iteration limits must be positive");
  if (!(o.tol_rel_obj > 0.0) || !(o.tol_param > 0.0) || !(o.lm_handoff_rel > 0.0))
    throw InvalidInput("tolerances must be > 0");
}

struct TraceEntry {
  std::string phase; // "init", "lm" or "nr"
  int iteration = 0;
  LossBreakdown loss;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double lambda3 = 0.0;
  double max_step = 0.0;
};

struct FitResult {
  ParameterState state;
  PenaltySettings penalties; // final lambda values
  VarianceEstimates variances;
  bool variances_estimated = false;
  std::vector<TraceEntry> loss_trace;
  bool converged = false;
  int n_lm = 0;
  int n_nr = 0;
  Eigen::MatrixXd Wn;
  double wn_condition = 0.0;
  std::vector<std::string> diagnostics;
  int variational_curves = 0;
  int left_support_curves = 0;

  const LossBreakdown &final_loss() const { return loss_trace.back().loss; }
};

/// beta* + delta with [J^T J + lambda3 diag(J^T J) + B] delta = J^T eps - B beta*.
inline Eigen::VectorXd lm_step_beta(const JacobianBlocks &jb, const Eigen::MatrixXd &B, double lambda3,
                                    const Eigen::VectorXd &beta_star) {
  if (!(lambda3 >= 0.0))
    throw InvalidInput("lm_step_beta: lambda3 must be >= 0");
  const Eigen::MatrixXd JtJ = jb.J_beta.transpose() * jb.J_beta;
  Eigen::MatrixXd lhs = JtJ;
  lhs.diagonal() += lambda3 * JtJ.diagonal();
  Eigen::VectorXd rhs = jb.J_beta.transpose() * jb.eps;
  if (B.size() > 0) {
    lhs += B;
    rhs -= B * beta_star;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(lhs);
  if (qr.rank() < lhs.cols())
    throw ModelError("lm_step_beta: singular system (rank " + std::to_string(qr.rank()) + " of " +
                     std::to_string(lhs.cols()) + ")");
  return beta_star + qr.solve(rhs);
}

/// Unrecentred per-subject increments (J^T J + lambda2) delta = J^T eps - lambda2 theta*.
inline Eigen::VectorXd theta_increment(const JacobianBlocks &jb, double lambda2, const Eigen::VectorXd &theta_star) {
  if (!(lambda2 >= 0.0))
    throw InvalidInput("lm_step_theta: lambda2 must be >= 0");
  Eigen::VectorXd delta(theta_star.size());
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    const auto &J = jb.J_theta[static_cast<std::size_t>(i)];
    const double denom = J.squaredNorm() + lambda2;
    if (!(denom > 0.0))
      throw ModelError("lm_step_theta: J^T J + lambda2 = 0 for subject " + std::to_string(i));
    delta[i] = (J.dot(jb.subject_eps(static_cast<std::size_t>(i))) - lambda2 * theta_star[i]) / denom;
  }
  return delta;
}

struct ThetaStep {
  Eigen::VectorXd theta; // re-centred, mean zero
  double shift = 0.0;    // the mean that was removed
};

/// Subtracts the mean. The fit compensates by scaling beta by exp(shift),
/// which leaves every trajectory unchanged.
inline ThetaStep recenter(Eigen::VectorXd theta) {
  ThetaStep out;
  out.shift = theta.size() ? theta.mean() : 0.0;
  theta.array() -= out.shift;
  out.theta = std::move(theta);
  return out;
}

inline ThetaStep lm_step_theta(const JacobianBlocks &jb, double lambda2, const Eigen::VectorXd &theta_star) {
  return recenter(theta_star + theta_increment(jb, lambda2, theta_star));
}

struct AStep {
  std::vector<std::vector<double>> a;
  double alpha = 0.0;
};

/// Per-curve increments of the initial values, each pulled towards the
/// current mean alpha* = mean(a*).
inline std::vector<double> a_increment(const JacobianBlocks &jb, double lambda1, const ParameterState &state) {
  if (!(lambda1 >= 0.0))
    throw InvalidInput("lm_step_a: lambda1 must be >= 0");
  const double alpha_star = state.mean_a();
  std::vector<double> delta(jb.index.size());
  for (std::size_t c = 0; c < jb.index.size(); ++c) {
    const auto [i, l] = jb.index[c];
    const auto &J = jb.J_a[c];
    const double denom = J.squaredNorm() + lambda1;
    if (!(denom > 0.0))
      throw ModelError("lm_step_a: J^T J + lambda1 = 0 for curve " + std::to_string(c));
    delta[c] = (J.dot(jb.curve_eps(c)) + lambda1 * (alpha_star - state.a[i][l])) / denom;
  }
  return delta;
}

inline AStep lm_step_a(const JacobianBlocks &jb, double lambda1, const ParameterState &state) {
  const std::vector<double> delta = a_increment(jb, lambda1, state);
  AStep out{state.a, 0.0};
  for (std::size_t c = 0; c < jb.index.size(); ++c) {
    const auto [i, l] = jb.index[c];
    out.a[i][l] += delta[c];
  }
  ParameterState tmp;
  tmp.a = out.a;
  out.alpha = tmp.mean_a();
  return out;
}

/// Gauss-Newton direction for the joint objective over (beta, theta[, a]),
/// with alpha profiled out as mean(a) and the theta increments summing to
/// zero. Returns nothing when the system is not positive definite.
inline std::optional<Eigen::VectorXd> newton_direction(const JacobianBlocks &jb, const ParameterState &state,
                                                       const PenaltySettings &pen, const Eigen::MatrixXd &B) {
  const auto M = jb.J_beta.cols();
  const auto n = static_cast<Eigen::Index>(jb.J_theta.size());
  const auto N = pen.a_known ? Eigen::Index{0} : static_cast<Eigen::Index>(jb.J_a.size());
  const Eigen::Index p = M + n + N;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd rhs(p);

  H.topLeftCorner(M, M) = jb.J_beta.transpose() * jb.J_beta;
  rhs.head(M) = jb.J_beta.transpose() * jb.eps;
  if (B.size() > 0) {
    H.topLeftCorner(M, M) += B;
    rhs.head(M) -= B * state.beta;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const auto &Jt = jb.J_theta[si];
    const auto r0 = jb.subject_row[si];
    const Eigen::VectorXd cross = jb.J_beta.middleRows(r0, Jt.size()).transpose() * Jt;
    H.block(0, M + i, M, 1) = cross;
    H.block(M + i, 0, 1, M) = cross.transpose();
    H(M + i, M + i) = Jt.squaredNorm() + pen.lambda2;
    rhs[M + i] = Jt.dot(jb.subject_eps(si)) - pen.lambda2 * state.theta[i];
  }
  if (N > 0) {
    const double abar = state.mean_a();
    for (std::size_t c = 0; c < jb.index.size(); ++c) {
      const auto [i, l] = jb.index[c];
      const auto k = M + n + static_cast<Eigen::Index>(c);
      const auto &Ja = jb.J_a[c];
      const auto r0 = static_cast<Eigen::Index>(jb.index.row(c));
      const Eigen::VectorXd cross = jb.J_beta.middleRows(r0, Ja.size()).transpose() * Ja;
      H.block(0, k, M, 1) = cross;
      H.block(k, 0, 1, M) = cross.transpose();
      const auto ti = M + static_cast<Eigen::Index>(i);
      const double ct = jb.J_theta[i].segment(r0 - jb.subject_row[i], Ja.size()).dot(Ja);
      H(ti, k) = ct;
      H(k, ti) = ct;
      H(k, k) += Ja.squaredNorm();
      rhs[k] = Ja.dot(jb.curve_eps(c)) - pen.lambda1 * (state.a[i][l] - abar);
    }
    H.bottomRightCorner(N, N).diagonal().array() += pen.lambda1;
    H.bottomRightCorner(N, N).array() -= pen.lambda1 / static_cast<double>(N);
  }
  // Restrict theta increments to sum zero so a centred theta stays centred:
  // delta_theta = Z u with columns e_k - e_n.
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(p, p - (n > 0 ? 1 : 0));
  T.topLeftCorner(M, M).setIdentity();
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    T(M + k, M + k) = 1.0;
    T(M + n - 1, M + k) = -1.0;
  }
  if (N > 0)
    T.bottomRightCorner(N, N).setIdentity();
  Eigen::LLT<Eigen::MatrixXd> llt(T.transpose() * H * T);
  if (llt.info() != Eigen::Success)
    return std::nullopt;
  Eigen::VectorXd delta = T * llt.solve(T.transpose() * rhs);
  if (!delta.allFinite())
    return std::nullopt;
  return delta;
}

namespace detail {

inline double max_change(const ParameterState &x, const ParameterState &y) {
  double out = (x.beta - y.beta).cwiseAbs().maxCoeff();
  if (x.theta.size())
    out = std::max(out, (x.theta - y.theta).cwiseAbs().maxCoeff());
  for (std::size_t i = 0; i < x.a.size(); ++i)
    for (std::size_t l = 0; l < x.a[i].size(); ++l)
      out = std::max(out, std::abs(x.a[i][l] - y.a[i][l]));
  return out;
}

inline double rel_change(double before, double after) {
  return std::abs(before - after) / std::max(std::abs(before), 1e-300);
}

/// Shared state of one fit: the current iterate, its evaluation (always
/// with sensitivities) and the running trace.
class FitDriver {
public:
  FitDriver(const Dataset &ds, const SplineBasis &basis, const PenaltyMatrix &B, const PenaltySettings &pen,
            const FitOptions &opts, ParameterState init)
      : ds_(ds), basis_(basis), B_(B.B), pen_(pen), opts_(opts), index_(ds) {
    check_state(ds, init, basis.size());
    state_ = std::move(init);
    if (pen_.a_known)
      state_.alpha = state_.mean_a();
    if (!evaluate(state_, ev_))
      throw ModelError("initial parameters produce a diverging trajectory: " + last_error_);
    loss_ = loss_from_residuals(ev_.residuals, state_, pen_, B_);
    record("init", 0, 0.0, 0.0);
  }

  int M() const { return basis_.size(); }
  const ParameterState &state() const { return state_; }
  const ModelEvaluation &evaluation() const { return ev_; }
  const LossBreakdown &current_loss() const { return loss_; }
  const PenaltySettings &penalties() const { return pen_; }
  std::vector<TraceEntry> &trace() { return trace_; }
  std::vector<std::string> &diagnostics() { return diag_; }

  /// Re-estimates lambda1, lambda2 from the current fit. A dataset that
  /// cannot support the estimators disables the update; a degenerate
  /// iterate (e.g. all theta still zero) only skips it.
  void adapt() {
    if (adapt_disabled_)
      return;
    std::vector<std::string> why;
    if (!validate_for_variance(ds_, M(), &why) || ds_.n_subjects() < 2 || ds_.n_curves() < 2) {
      adapt_disabled_ = true;
      diag_.push_back("adaptive lambda update disabled: " +
                      (why.empty() ? std::string("needs at least 2 subjects and 2 curves") : why.front()));
      return;
    }
    try {
      const VarianceEstimates v = update_variances(ds_, state_, ev_.residuals, M(), pen_.a_known);
      if (!pen_.a_known)
        pen_.lambda1 = v.lambda1;
      pen_.lambda2 = v.lambda2;
      pen_.adaptive = true;
      loss_ = loss_from_residuals(ev_.residuals, state_, pen_, B_);
    } catch (const ModelError &e) {
      if (!adapt_skipped_)
        diag_.push_back(std::string("adaptive lambda update skipped: ") + e.what());
      adapt_skipped_ = true;
    }
  }

  /// One beta -> theta -> a sweep. Returns the relative objective change and
  /// the largest parameter change.
  std::pair<double, double> lm_sweep(int j) {
    const double before = loss_.total;
    const ParameterState start = state_;

    // beta block, damping inflated until the objective does not increase
    double lambda3 = pen_.lambda3_0 / j;
    {
      const JacobianBlocks jb = blocks_from_evaluation(ds_, ev_, M());
      double lam = lambda3;
      for (int attempt = 0; attempt < 12; ++attempt) {
        ParameterState trial = state_;
        trial.beta = lm_step_beta(jb, B_, lam, state_.beta);
        if (accept(std::move(trial))) {
          lambda3 = lam;
          break;
        }
        lam = lam > 0.0 ? lam * 10.0 : 1e-4;
      }
    }
    // theta block, halved until the objective does not increase
    {
      const JacobianBlocks jb = blocks_from_evaluation(ds_, ev_, M());
      const Eigen::VectorXd delta = theta_increment(jb, pen_.lambda2, state_.theta);
      double s = 1.0;
      for (int attempt = 0; attempt < 12; ++attempt, s *= 0.5)
        if (accept(shifted(state_, Eigen::VectorXd::Zero(M()), s * delta, {})))
          break;
    }
    if (!pen_.a_known) {
      const JacobianBlocks jb = blocks_from_evaluation(ds_, ev_, M());
      const std::vector<double> delta = a_increment(jb, pen_.lambda1, state_);
      std::vector<double> step(delta.size());
      double s = 1.0;
      for (int attempt = 0; attempt < 12; ++attempt, s *= 0.5) {
        for (std::size_t c = 0; c < delta.size(); ++c)
          step[c] = s * delta[c];
        ParameterState trial = state_;
        add_a(trial, step);
        if (accept(std::move(trial)))
          break;
      }
    }
    const double step = max_change(start, state_);
    record("lm", j, lambda3, step);
    return {rel_change(before, loss_.total), step};
  }

  /// One Gauss-Newton step with step halving. Returns nothing if the system
  /// is indefinite or no halving decreases the objective.
  std::optional<std::pair<double, double>> newton_iteration(int k) {
    const double before = loss_.total;
    const ParameterState start = state_;
    const JacobianBlocks jb = blocks_from_evaluation(ds_, ev_, M());
    const auto delta = newton_direction(jb, state_, pen_, B_);
    if (!delta)
      return std::nullopt;
    const auto Mi = static_cast<Eigen::Index>(M());
    const auto n = static_cast<Eigen::Index>(ds_.n_subjects());
    double s = 1.0;
    bool ok = false;
    for (int attempt = 0; attempt < 12 && !ok; ++attempt, s *= 0.5) {
      std::vector<double> da;
      if (!pen_.a_known) {
        da.resize(index_.size());
        for (std::size_t c = 0; c < da.size(); ++c)
          da[c] = s * (*delta)[Mi + n + static_cast<Eigen::Index>(c)];
      }
      ok = accept(shifted(state_, s * delta->head(Mi), s * delta->segment(Mi, n), da));
    }
    if (!ok)
      return std::nullopt;
    const double step = max_change(start, state_);
    record("nr", k, 0.0, step);
    return std::make_pair(rel_change(before, loss_.total), step);
  }

private:
  bool evaluate(const ParameterState &st, ModelEvaluation &out) {
    try {
      out = evaluate_model(ds_, st, GradientFunction(basis_, st.beta), opts_.solver, true);
      return out.residuals.allFinite();
    } catch (const DivergenceError &e) {
      last_error_ = e.what();
      return false;
    }
  }

  /// Takes the trial if it evaluates and does not increase the objective.
  bool accept(ParameterState trial) {
    ModelEvaluation ev;
    if (!trial.beta.allFinite() || !trial.theta.allFinite() || !evaluate(trial, ev))
      return false;
    const LossBreakdown L = loss_from_residuals(ev.residuals, trial, pen_, B_);
    if (!(L.total <= loss_.total))
      return false;
    state_ = std::move(trial);
    ev_ = std::move(ev);
    loss_ = L;
    return true;
  }

  void add_a(ParameterState &st, const std::vector<double> &delta) const {
    for (std::size_t c = 0; c < delta.size(); ++c) {
      const auto [i, l] = index_[c];
      st.a[i][l] += delta[c];
    }
    st.alpha = st.mean_a();
  }

  /// Applies increments, then re-centres theta and rescales beta so that
  /// the trajectories stay the same.
  ParameterState shifted(const ParameterState &st, const Eigen::VectorXd &dbeta, const Eigen::VectorXd &dtheta,
                         const std::vector<double> &da) const {
    ParameterState out = st;
    out.beta += dbeta;
    const ThetaStep ts = recenter(st.theta + dtheta);
    out.theta = ts.theta;
    out.beta *= std::exp(ts.shift);
    if (!da.empty())
      add_a(out, da);
    return out;
  }

  void record(const char *phase, int it, double lambda3, double step) {
    trace_.push_back({phase, it, loss_, pen_.a_known ? 0.0 : pen_.lambda1, pen_.lambda2, lambda3, step});
  }

  const Dataset &ds_;
  SplineBasis basis_;
  Eigen::MatrixXd B_;
  PenaltySettings pen_;
  FitOptions opts_;
  CurveIndex index_;
  ParameterState state_;
  ModelEvaluation ev_;
  LossBreakdown loss_;
  std::vector<TraceEntry> trace_;
  std::vector<std::string> diag_;
  std::string last_error_;
  bool adapt_disabled_ = false;
  bool adapt_skipped_ = false;
};

inline void run_newton(FitDriver &d, const FitOptions &opts, int &n_nr, bool &converged, bool &fell_back) {
  for (int k = 1; k <= opts.max_nr_iters; ++k) {
    ++n_nr;
    if (opts.adaptive_nr)
      d.adapt();
    const auto r = d.newton_iteration(k);
    if (!r) {
      fell_back = true;
      return;
    }
    if (r->first < opts.tol_rel_obj && r->second < opts.tol_param) {
      converged = true;
      return;
    }
  }
}

} // namespace detail

struct NewtonOutcome {
  ParameterState state;
  PenaltySettings penalties;
  LossBreakdown before;
  LossBreakdown after;
  int iterations = 0;
  bool converged = false;
  bool fell_back = false; // an indefinite system or failed line search ended the polish
};

/// Newton polish from `state`. On fallback the caller is expected to run
/// another LM sweep; the returned state is never worse than the input.
inline NewtonOutcome newton_polish(const Dataset &ds, const ParameterState &state, const SplineBasis &basis,
                                   const PenaltySettings &pen, const PenaltyMatrix &B, const FitOptions &opts) {
  check_options(opts);
  detail::FitDriver d(ds, basis, B, pen, opts, state);
  NewtonOutcome out;
  out.before = d.current_loss();
  detail::run_newton(d, opts, out.iterations, out.converged, out.fell_back);
  out.state = d.state();
  out.penalties = d.penalties();
  out.after = d.current_loss();
  return out;
}

/// Initial state with beta = 1, theta = 0 and a = first observation unless
/// supplied. With a known, `init` must carry the known initial values.
inline FitResult fit(const Dataset &ds, const SplineBasis &basis, const PenaltyMatrix &B,
                     const PenaltySettings &pen, const FitOptions &opts,
                     const std::optional<ParameterState> &init = std::nullopt) {
  validate(ds);
  check_options(opts);
  if (B.B.rows() != basis.size() || B.B.cols() != basis.size())
    throw InvalidInput("penalty matrix does not match the basis size");
  if (!(pen.lambda1 >= 0.0) || !(pen.lambda2 >= 0.0) || !(pen.lambda3_0 >= 0.0))
    throw InvalidInput("penalty weights must be >= 0");
  if (pen.a_known && !init)
    throw InvalidInput("known initial values require an initial state");
  detail::FitDriver d(ds, basis, B, pen, opts, init ? *init : initial_state(ds, basis.size()));

  FitResult res;
  bool converged = false;
  while (!converged && res.n_lm < opts.max_lm_iters) {
    while (res.n_lm < opts.max_lm_iters) {
      ++res.n_lm;
      if (opts.adaptive_lm)
        d.adapt();
      const auto [rel, step] = d.lm_sweep(res.n_lm);
      if (rel < opts.tol_rel_obj && step < opts.tol_param) {
        converged = true;
        break;
      }
      if (opts.newton && opts.max_nr_iters > 0 && rel < opts.lm_handoff_rel)
        break;
    }
    if (converged || !opts.newton || opts.max_nr_iters == 0)
      continue;
    bool fell_back = false;
    detail::run_newton(d, opts, res.n_nr, converged, fell_back);
    if (fell_back)
      d.diagnostics().push_back("newton step rejected after " + std::to_string(res.n_nr) +
                                " NR iterations; continuing with LM");
  }
  if (!converged)
    d.diagnostics().push_back("not converged after " + std::to_string(res.n_lm) + " LM sweeps");

  res.converged = converged;
  res.state = d.state();
  res.penalties = d.penalties();
  res.loss_trace = std::move(d.trace());
  const ModelEvaluation &ev = d.evaluation();
  res.variational_curves = ev.variational;
  res.left_support_curves = ev.left_support;
  if (ev.left_support > 0)
    d.diagnostics().push_back(std::to_string(ev.left_support) + " trajectories left the basis support");
  try {
    res.variances = update_variances(ds, res.state, ev.residuals, basis.size(), pen.a_known);
    res.variances_estimated = true;
  } catch (const ModelError &e) {
    const double dof = static_cast<double>(ds.n_measurements()) - static_cast<double>(ds.n_curves()) -
                       static_cast<double>(ds.n_subjects()) - basis.size();
    res.variances.sigma_eps2 = ev.residuals.squaredNorm() / (dof > 0 ? dof : static_cast<double>(ds.n_measurements()));
    d.diagnostics().push_back(std::string("variance estimates incomplete: ") + e.what());
  }
  const InfoMatrices info = info_matrices_from_blocks(blocks_from_evaluation(ds, ev, basis.size()), B.B,
                                                      res.penalties.lambda2);
  res.wn_condition = info.condition;
  if (info.invertible)
    res.Wn = info.Wn;
  else
    d.diagnostics().push_back("information matrix not invertible; no standard errors");
  res.diagnostics = std::move(d.diagnostics());
  return res;
}

} // namespace semidyn

#endif // SEMIDYN_OPTIMIZER_HPP
