#ifndef SEMIDYN_TWOSTAGE_HPP
#define SEMIDYN_TWOSTAGE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/parallel.hpp"
#include "semidyn/quadrature.hpp"

namespace semidyn {

inline double epanechnikov(double u) { return std::abs(u) < 1.0 ? 0.75 * (1.0 - u * u) : 0.0; }

/// Geometric grid of `count` bandwidths from lo_frac*range to hi_frac*range.
inline std::vector<double> geometric_grid(double range, int count = 15, double lo_frac = 0.05, double hi_frac = 1.0) {
  if (!(range > 0.0) || count < 1 || !(lo_frac > 0.0) || !(hi_frac >= lo_frac))
    throw InvalidInput("geometric_grid: bad arguments");
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const double f = count == 1 ? 0.0 : static_cast<double>(k) / (count - 1);
    out[static_cast<std::size_t>(k)] = range * lo_frac * std::pow(hi_frac / lo_frac, f);
  }
  return out;
}

namespace detail {

/// Kernel-weighted polynomial fit of order `p` centred at x0, skipping
/// index `skip`. Returns the coefficients of (x - x0)^k, or nothing when
/// fewer than p + 1 points carry weight or the design is singular.
inline std::optional<Eigen::VectorXd> local_poly(const std::vector<double> &x, const std::vector<double> &y, double x0,
                                                 double bw, int p, std::size_t skip = static_cast<std::size_t>(-1)) {
  const int q = p + 1;
  Eigen::MatrixXd XtWX = Eigen::MatrixXd::Zero(q, q);
  Eigen::VectorXd XtWy = Eigen::VectorXd::Zero(q);
  int used = 0;
  double pw[8];
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (k == skip)
      continue;
    const double d = x[k] - x0;
    const double w = epanechnikov(d / bw);
    if (w <= 0.0)
      continue;
    ++used;
    const double u = d / bw; // scaled for conditioning
    pw[0] = 1.0;
    for (int r = 1; r < 2 * q - 1; ++r)
      pw[r] = pw[r - 1] * u;
    for (int r = 0; r < q; ++r) {
      XtWy[r] += w * pw[r] * y[k];
      for (int c = 0; c < q; ++c)
        XtWX(r, c) += w * pw[r + c];
    }
  }
  if (used < q)
    return std::nullopt;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(XtWX);
  qr.setThreshold(1e-12);
  if (qr.rank() < q)
    return std::nullopt;
  Eigen::VectorXd coef = qr.solve(XtWy);
  double s = 1.0;
  for (int r = 0; r < q; ++r, s *= bw)
    coef[r] /= s;
  return coef;
}

/// Leave-one-out squared prediction error of the order-p smoother, or
/// +inf if some left-out fit is singular.
inline double loo_score(const std::vector<double> &x, const std::vector<double> &y, double bw, int p) {
  double score = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const auto coef = local_poly(x, y, x[k], bw, p, k);
    if (!coef)
      return std::numeric_limits<double>::infinity();
    const double e = y[k] - (*coef)[0];
    score += e * e;
  }
  return score;
}

struct BandwidthChoice {
  double bw = 0.0;
  double score = 0.0;
  bool from_cv = true; // false: no grid value gave finite CV, largest used
};

inline BandwidthChoice choose_bandwidth(const std::vector<double> &x, const std::vector<double> &y,
                                        const std::vector<double> &grid, int p) {
  BandwidthChoice best{grid.back(), std::numeric_limits<double>::infinity(), false};
  for (double bw : grid) {
    const double s = loo_score(x, y, bw, p);
    if (s < best.score)
      best = {bw, s, true};
  }
  if (!best.from_cv)
    best.bw = *std::max_element(grid.begin(), grid.end());
  return best;
}

/// Local fit at x0, widening the bandwidth by 25% until the design is
/// nonsingular. Returns the coefficients and the bandwidth used.
inline std::pair<Eigen::VectorXd, double> local_poly_widening(const std::vector<double> &x, const std::vector<double> &y,
                                                              double x0, double bw, int p) {
  for (int k = 0; k < 200; ++k, bw *= 1.25)
    if (auto coef = local_poly(x, y, x0, bw, p))
      return {*coef, bw};
  throw ModelError("local polynomial fit singular at every bandwidth");
}

} // namespace detail

struct Presmoothed {
  std::vector<double> x_hat;      // local linear values at the evaluation times
  std::vector<double> xprime_hat; // local quadratic slopes at the evaluation times
  double bw_value = 0.0;
  double bw_deriv = 0.0;
  bool widened = false; // some evaluation needed a wider bandwidth than chosen
  bool cv_failed = false;
};

/// Local linear values and local quadratic derivatives of one curve, with
/// bandwidths (relative fractions of the time range) chosen by LOO-CV.
/// An empty grid uses 15 geometric points on [0.05, 1] x range.
inline Presmoothed presmooth_curve(const std::vector<double> &times, const std::vector<double> &values,
                                   const std::vector<double> &eval_times, std::vector<double> rel_grid = {}) {
  if (times.size() < 3)
    throw InvalidInput("presmooth_curve: need at least 3 measurements");
  if (times.size() != values.size())
    throw InvalidInput("presmooth_curve: times and values differ in length");
  const double range = times.back() - times.front();
  if (!(range > 0.0))
    throw InvalidInput("presmooth_curve: times must span a positive range");
  std::vector<double> grid;
  if (rel_grid.empty())
    grid = geometric_grid(range);
  else
    for (double f : rel_grid) {
      if (!(f > 0.0))
        throw InvalidInput("presmooth_curve: bandwidths must be positive");
      grid.push_back(f * range);
    }

  Presmoothed out;
  const auto val = detail::choose_bandwidth(times, values, grid, 1);
  const auto der = detail::choose_bandwidth(times, values, grid, 2);
  out.bw_value = val.bw;
  out.bw_deriv = der.bw;
  out.cv_failed = !val.from_cv || !der.from_cv;
  out.x_hat.resize(eval_times.size());
  out.xprime_hat.resize(eval_times.size());
  for (std::size_t k = 0; k < eval_times.size(); ++k) {
    const auto [cv, bv] = detail::local_poly_widening(times, values, eval_times[k], val.bw, 1);
    const auto [cd, bd] = detail::local_poly_widening(times, values, eval_times[k], der.bw, 2);
    out.x_hat[k] = cv[0];
    out.xprime_hat[k] = cd[1];
    out.widened = out.widened || bv > val.bw || bd > der.bw;
  }
  return out;
}

enum class Stage2Method { basis_regression, local_quadratic };

struct TwoStageOptions {
  std::vector<double> bandwidth_grid;        // relative to each curve's time range; empty = default
  Stage2Method stage2 = Stage2Method::local_quadratic;
  std::vector<double> stage2_bandwidth_grid; // relative to the range of pooled values; empty = default
  std::optional<SplineBasis> basis;          // for basis regression
  int threads = 1;
};

/// Estimate of g from the pooled (X_hat, X_hat') pairs.
struct Stage2Fit {
  Stage2Method method = Stage2Method::local_quadratic;
  Eigen::VectorXd beta;               // basis regression
  std::optional<SplineBasis> basis;
  std::vector<double> x, y;           // pooled pairs, sorted by x (local quadratic)
  double bandwidth = 0.0;

  double value(double at) const {
    if (method == Stage2Method::basis_regression)
      return basis->combine(beta, at);
    return detail::local_poly_widening(x, y, at, bandwidth, 2).first[0];
  }
};

inline Stage2Fit stage2_fit(std::vector<double> x, std::vector<double> y, const TwoStageOptions &opts) {
  if (x.size() != y.size())
    throw InvalidInput("stage2_fit: x and y differ in length");
  Stage2Fit out;
  out.method = opts.stage2;
  if (opts.stage2 == Stage2Method::basis_regression) {
    if (!opts.basis)
      throw InvalidInput("stage2_fit: basis regression needs a basis");
    const int M = opts.basis->size();
    if (x.size() < static_cast<std::size_t>(M))
      throw ModelError("stage2_fit: fewer pooled points than basis functions");
    Eigen::MatrixXd X(static_cast<Eigen::Index>(x.size()), M);
    for (std::size_t k = 0; k < x.size(); ++k)
      X.row(static_cast<Eigen::Index>(k)) = opts.basis->eval(x[k]).transpose();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < M)
      throw ModelError("stage2_fit: rank-deficient design (rank " + std::to_string(qr.rank()) + " of " +
                       std::to_string(M) + ")");
    out.beta = qr.solve(Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())));
    out.basis = opts.basis;
    return out;
  }
  if (x.size() < 3)
    throw ModelError("stage2_fit: local quadratic needs at least 3 pooled points");
  std::vector<std::size_t> order(x.size());
  for (std::size_t k = 0; k < order.size(); ++k)
    order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t p, std::size_t q) { return x[p] < x[q]; });
  for (std::size_t k : order) {
    out.x.push_back(x[k]);
    out.y.push_back(y[k]);
  }
  const double range = out.x.back() - out.x.front();
  if (!(range > 0.0))
    throw ModelError("stage2_fit: pooled values have no spread");
  std::vector<double> grid;
  if (opts.stage2_bandwidth_grid.empty())
    grid = geometric_grid(range);
  else
    for (double f : opts.stage2_bandwidth_grid)
      grid.push_back(f * range);
  out.bandwidth = detail::choose_bandwidth(out.x, out.y, grid, 2).bw;
  return out;
}

struct TwoStageResult {
  Stage2Fit fit;
  std::size_t smoothed = 0;
  std::size_t skipped = 0;
  std::size_t widened = 0;
  std::vector<std::string> warnings;

  double value(double x) const { return fit.value(x); }
};

/// Smooths every curve at its own times, pools the (X_hat, X_hat') pairs and
/// regresses slope on value.
inline TwoStageResult two_stage(const Dataset &ds, const TwoStageOptions &opts) {
  validate(ds);
  const CurveIndex index(ds);
  std::vector<std::optional<Presmoothed>> smooth(index.size());
  parallel_for(index.size(), opts.threads, [&](std::size_t c) {
    const auto [i, l] = index[c];
    const Curve &curve = ds.subjects[i].curves[l];
    if (curve.size() < 3)
      return;
    smooth[c] = presmooth_curve(curve.times, curve.values, curve.times, opts.bandwidth_grid);
  });
  TwoStageResult out;
  std::vector<double> xs, ys;
  for (std::size_t c = 0; c < index.size(); ++c) {
    if (!smooth[c]) {
      ++out.skipped;
      continue;
    }
    ++out.smoothed;
    out.widened += smooth[c]->widened ? 1 : 0;
    xs.insert(xs.end(), smooth[c]->x_hat.begin(), smooth[c]->x_hat.end());
    ys.insert(ys.end(), smooth[c]->xprime_hat.begin(), smooth[c]->xprime_hat.end());
  }
  if (out.skipped)
    out.warnings.push_back(std::to_string(out.skipped) + " curves with fewer than 3 points skipped");
  if (out.widened)
    out.warnings.push_back(std::to_string(out.widened) + " curves needed a widened bandwidth");
  out.fit = stage2_fit(std::move(xs), std::move(ys), opts);
  return out;
}

struct Region {
  double lo = 0.0;
  double hi = 0.0;
  std::string name;
};

inline std::vector<Region> default_regions() {
  return {{-0.5, 0.2, "[-0.5,0.2]"}, {0.2, 1.0, "(0.2,1]"}, {1.0, 1.5, "(1,1.5]"}};
}

/// Trapezoid-rule integral of (g_hat - g)^2 over each region, 2000 panels
/// per unit length.
inline std::vector<double> region_ise(const std::function<double(double)> &g_hat,
                                      const std::function<double(double)> &g_true,
                                      const std::vector<Region> &regions) {
  std::vector<double> out;
  for (const auto &r : regions) {
    if (!(r.hi > r.lo))
      throw InvalidInput("region_ise: empty region");
    const int panels = std::max(1, static_cast<int>(std::ceil(2000.0 * (r.hi - r.lo) - 1e-9)));
    out.push_back(trapezoid(
        [&](double x) {
          const double d = g_hat(x) - g_true(x);
          return d * d;
        },
        r.lo, r.hi, panels));
  }
  return out;
}

} // namespace semidyn

#endif // SEMIDYN_TWOSTAGE_HPP
