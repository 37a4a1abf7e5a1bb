#ifndef SEMIDYN_INFERENCE_HPP
#define SEMIDYN_INFERENCE_HPP

#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/dynamics.hpp"
#include "semidyn/jacobian.hpp"

namespace semidyn {

/// Sensitivity cross-products at the fit and the penalized inverse Wn.
struct InfoMatrices {
  Eigen::MatrixXd An;    // sum over measurements of dX/dbeta dX/dbeta^T
  Eigen::MatrixXd Cn;    // row i: sum over subject i of dX/dtheta_i dX/dbeta^T
  Eigen::VectorXd Dn;    // diagonal: sum over subject i of (dX/dtheta_i)^2
  Eigen::MatrixXd schur; // An + B - Cn^T (Dn + lambda2)^-1 Cn
  Eigen::MatrixXd Wn;    // schur^-1, empty when not invertible
  double lambda2 = 0.0;
  double condition = 0.0;
  bool invertible = false;

  Eigen::MatrixXd Dn_matrix() const { return Dn.asDiagonal(); }
  Eigen::MatrixXd V_beta(double sigma_eps2) const { return sigma_eps2 * Wn; }
};

inline InfoMatrices info_matrices_from_blocks(const JacobianBlocks &jb, const Eigen::MatrixXd &B, double lambda2) {
  if (!(lambda2 >= 0.0))
    throw InvalidInput("info_matrices: lambda2 must be >= 0");
  const auto M = jb.J_beta.cols();
  const auto n = static_cast<Eigen::Index>(jb.J_theta.size());
  InfoMatrices out;
  out.lambda2 = lambda2;
  out.An = jb.J_beta.transpose() * jb.J_beta;
  out.An = 0.5 * (out.An + out.An.transpose()).eval();
  out.Cn.setZero(n, M);
  out.Dn.setZero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r0 = jb.subject_row[static_cast<std::size_t>(i)];
    const auto rows = jb.J_theta[static_cast<std::size_t>(i)].size();
    const Eigen::VectorXd &jt = jb.J_theta[static_cast<std::size_t>(i)];
    out.Cn.row(i) = jt.transpose() * jb.J_beta.middleRows(r0, rows);
    out.Dn[i] = jt.squaredNorm();
  }
  out.schur = out.An;
  if (B.size() > 0)
    out.schur += B;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = out.Dn[i] + lambda2;
    if (d > 0.0)
      out.schur -= out.Cn.row(i).transpose() * out.Cn.row(i) / d;
  }
  out.schur = 0.5 * (out.schur + out.schur.transpose()).eval();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.schur);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().cwiseAbs().maxCoeff();
  out.condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (lo > 1e-14 * std::max(hi, 1e-300)) {
    const Eigen::VectorXd inv = eig.eigenvalues().cwiseInverse();
    out.Wn = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
    out.Wn = 0.5 * (out.Wn + out.Wn.transpose()).eval();
    out.invertible = true;
  }
  return out;
}

/// Information matrices at a fitted state. Throws ModelError if the
/// penalized Schur complement is singular.
inline InfoMatrices info_matrices(const Dataset &ds, const ParameterState &state, const GradientFunction &g,
                                  const SolverSettings &settings, double lambda2, const Eigen::MatrixXd &B) {
  InfoMatrices out = info_matrices_from_blocks(assemble_jacobians(ds, state, g, settings), B, lambda2);
  if (!out.invertible) {
    std::ostringstream msg;
    msg << "information matrix not invertible (condition estimate " << out.condition << ")";
    throw ModelError(msg.str());
  }
  return out;
}

/// Pointwise standard errors sqrt(phi(x)^T V phi(x)) with V = sigma_eps2 * Wn.
/// Negative quadratic forms (rounding) are clamped to 0 and counted in `clamped`.
inline std::vector<double> se_g(const Eigen::MatrixXd &Wn, double sigma_eps2, const SplineBasis &basis,
                                const std::vector<double> &xs, int *clamped = nullptr) {
  if (Wn.rows() != basis.size() || Wn.cols() != basis.size())
    throw InvalidInput("se_g: Wn does not match the basis size");
  std::vector<double> out(xs.size());
  int neg = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Eigen::VectorXd phi = basis.eval(xs[k]);
    double q = sigma_eps2 * phi.dot(Wn * phi);
    if (q < 0.0) {
      ++neg;
      q = 0.0;
    }
    out[k] = std::sqrt(q);
  }
  if (clamped)
    *clamped = neg;
  return out;
}

inline std::vector<double> se_g(const InfoMatrices &info, double sigma_eps2, const SplineBasis &basis,
                                const std::vector<double> &xs, int *clamped = nullptr) {
  if (!info.invertible)
    throw ModelError("se_g: Wn not available");
  return se_g(info.Wn, sigma_eps2, basis, xs, clamped);
}

/// Evenly spaced grid of `count` points on [lo, hi].
inline std::vector<double> linspace(double lo, double hi, int count) {
  if (count < 1)
    throw InvalidInput("grid needs at least one point");
  std::vector<double> xs(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k)
    xs[static_cast<std::size_t>(k)] = count == 1 ? lo : lo + (hi - lo) * k / (count - 1);
  return xs;
}

/// CSV with columns x, g_hat, se, lo95, hi95 (bands at +-2 SE). Without Wn
/// the SE columns are left empty.
inline void write_se_csv(std::ostream &out, const GradientFunction &g, const Eigen::MatrixXd &Wn,
                         double sigma_eps2, const std::vector<double> &xs) {
  out << "x,g_hat,se,lo95,hi95\n";
  std::vector<double> se;
  if (Wn.size() > 0)
    se = se_g(Wn, sigma_eps2, g.basis, xs);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double v = g.value(xs[k]);
    out << detail::format_double(xs[k]) << ',' << detail::format_double(v);
    if (se.empty())
      out << ",,,\n";
    else
      out << ',' << detail::format_double(se[k]) << ',' << detail::format_double(v - 2 * se[k]) << ','
          << detail::format_double(v + 2 * se[k]) << '\n';
  }
}

} // namespace semidyn

#endif // SEMIDYN_INFERENCE_HPP
