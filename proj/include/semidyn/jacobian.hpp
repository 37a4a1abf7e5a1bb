#ifndef SEMIDYN_JACOBIAN_HPP
#define SEMIDYN_JACOBIAN_HPP

#include <vector>

#include <Eigen/Dense>

#include "semidyn/data.hpp"
#include "semidyn/dynamics.hpp"
#include "semidyn/objective.hpp"

namespace semidyn {

/// Stacked sensitivities at the measurement times, rows in (i, l, j) order.
struct JacobianBlocks {
  Eigen::MatrixXd J_beta;               // m.. x M
  std::vector<Eigen::VectorXd> J_theta; // per subject, m_i. rows
  std::vector<Eigen::VectorXd> J_a;     // per curve (flat index), m_il rows
  Eigen::VectorXd eps;                  // stacked residuals, m.. rows
  CurveIndex index;
  std::vector<Eigen::Index> subject_row; // first stacked row of each subject (+ end)

  /// Residuals of subject i.
  Eigen::VectorXd subject_eps(std::size_t i) const {
    return eps.segment(subject_row[i], subject_row[i + 1] - subject_row[i]);
  }
  /// Residuals of curve c (flat index).
  Eigen::VectorXd curve_eps(std::size_t c) const {
    return eps.segment(static_cast<Eigen::Index>(index.row(c)), J_a[c].size());
  }
};

/// Packs an evaluation that carries sensitivities into Jacobian blocks.
inline JacobianBlocks blocks_from_evaluation(const Dataset &ds, const ModelEvaluation &ev, int M) {
  JacobianBlocks jb;
  jb.index = CurveIndex(ds);
  const auto rows = static_cast<Eigen::Index>(jb.index.rows());
  jb.J_beta.resize(rows, M);
  jb.eps = ev.residuals;
  jb.J_theta.resize(ds.n_subjects());
  jb.J_a.resize(jb.index.size());
  jb.subject_row.assign(ds.n_subjects() + 1, 0);
  for (std::size_t c = 0; c < jb.index.size(); ++c) {
    const auto [i, l] = jb.index[c];
    const CurveSample &s = ev.samples[c];
    if (s.d_a.size() != s.value.size())
      throw InvalidInput("blocks_from_evaluation: evaluation has no sensitivities");
    const auto m = static_cast<Eigen::Index>(s.value.size());
    const auto r0 = static_cast<Eigen::Index>(jb.index.row(c));
    jb.J_beta.block(r0, 0, m, M) = s.d_beta;
    jb.J_a[c] = Eigen::Map<const Eigen::VectorXd>(s.d_a.data(), m);
    if (l == 0)
      jb.subject_row[i] = r0;
  }
  jb.subject_row[ds.n_subjects()] = rows;
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    Eigen::VectorXd col(jb.subject_row[i + 1] - jb.subject_row[i]);
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < ds.subjects[i].curves.size(); ++l)
      for (double v : ev.samples[jb.index.flat(i, l)].d_theta)
        col[k++] = v;
    jb.J_theta[i] = std::move(col);
  }
  return jb;
}

/// dX/dbeta, dX/dtheta_i and dX/da_il at all measurement times, with the
/// current residuals.
inline JacobianBlocks assemble_jacobians(const Dataset &ds, const ParameterState &state,
                                         const GradientFunction &g, const SolverSettings &settings = {}) {
  return blocks_from_evaluation(ds, evaluate_model(ds, state, g, settings, true), g.size());
}

} // namespace semidyn

#endif // SEMIDYN_JACOBIAN_HPP
