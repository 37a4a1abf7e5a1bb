#ifndef SEMIDYN_BASIS_HPP
#define SEMIDYN_BASIS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "semidyn/error.hpp"
#include "semidyn/quadrature.hpp"

namespace semidyn {

/// How the boundary knots of a spline basis are laid out.
///
/// `clamped` repeats lo and hi degree+1 times, giving the usual basis that
/// sums to one on all of [lo, hi]. `open` uses lo and hi as simple knots,
/// so the knot vector is exactly {lo, interior..., hi} and every function
/// is a full (non-truncated) B-spline; this is the layout of uniformly
/// spaced cardinal cubic bases.
enum class KnotLayout { clamped, open };

/// B-spline basis of a fixed degree on [lo, hi].
///
/// The first `drop_leading` functions of the knot vector are omitted from
/// the basis, which is how g(lo) = g'(lo) = 0 is imposed for a clamped
/// cubic basis with drop_leading = 2. Outside [lo, hi] every function and
/// derivative is zero.
class SplineBasis {
public:
  static constexpr int kMaxDegree = 5;

  /// Nonzero basis values at a point: functions first .. first+count-1 in
  /// the retained numbering.
  struct Local {
    int first = 0;
    int count = 0;
    std::array<double, kMaxDegree + 1> values{};
  };

  SplineBasis() : SplineBasis(3, {}, 0.0, 1.0) {}

  SplineBasis(int degree, std::vector<double> interior_knots, double lo, double hi,
              int drop_leading = 0, KnotLayout layout = KnotLayout::clamped)
      : degree_(degree), interior_(std::move(interior_knots)), lo_(lo), hi_(hi),
        drop_(drop_leading), layout_(layout) {
    if (degree_ < 1 || degree_ > kMaxDegree)
      throw InvalidInput("SplineBasis: degree must be in [1, " + std::to_string(kMaxDegree) + "]");
    if (!std::isfinite(lo_) || !std::isfinite(hi_) || !(lo_ < hi_))
      throw InvalidInput("SplineBasis: need finite lo < hi");
    for (std::size_t k = 0; k < interior_.size(); ++k) {
      if (!(interior_[k] > lo_ && interior_[k] < hi_))
        throw InvalidInput("SplineBasis: interior knots must lie strictly inside (lo, hi)");
      if (k > 0 && !(interior_[k] > interior_[k - 1]))
        throw InvalidInput("SplineBasis: interior knots must be strictly increasing");
    }
    if (drop_ < 0 || drop_ > 2)
      throw InvalidInput("SplineBasis: drop_leading must be 0, 1 or 2");

    const int reps = layout_ == KnotLayout::clamped ? degree_ + 1 : 1;
    knots_.assign(reps, lo_);
    knots_.insert(knots_.end(), interior_.begin(), interior_.end());
    knots_.insert(knots_.end(), reps, hi_);
    n_full_ = static_cast<int>(knots_.size()) - degree_ - 1;
    if (n_full_ - drop_ < 1)
      throw InvalidInput("SplineBasis: knot vector too short for the requested degree");

    // Pad with `degree` extra copies of each end knot so every x in [lo, hi]
    // has a full span of degree+1 functions. Padding does not change the
    // original functions, which depend only on their own knots.
    padded_.assign(degree_, knots_.front());
    padded_.insert(padded_.end(), knots_.begin(), knots_.end());
    padded_.insert(padded_.end(), degree_, knots_.back());
  }

  /// Uniform open layout with knots origin + j*span/M, j = -(degree-1) .. M+1.
  ///
  /// For degree 3 this puts M knots at origin + j*span/M (j = 1..M) plus two
  /// uniform extension knots below and one above, which yields exactly M
  /// cubic functions.
  static SplineBasis uniform_open(int M, double origin = 0.1, double span = 1.0, int degree = 3) {
    if (M < 1)
      throw InvalidInput("uniform_open: M must be positive");
    if (!(span > 0.0))
      throw InvalidInput("uniform_open: span must be positive");
    const double step = span / M;
    const int j0 = 1 - degree;
    const int j1 = j0 + M + degree; // inclusive
    std::vector<double> interior;
    for (int j = j0 + 1; j < j1; ++j)
      interior.push_back(origin + step * j);
    return SplineBasis(degree, std::move(interior), origin + step * j0, origin + step * j1, 0,
                       KnotLayout::open);
  }

  /// Clamped basis whose boundary covers [data_lo, data_hi] widened by
  /// `margin` times the data range on each side (and always the knots).
  static SplineBasis covering(int degree, std::vector<double> interior, double data_lo,
                              double data_hi, int drop_leading = 0, double margin = 0.25) {
    const double range = std::max(data_hi - data_lo, 1e-12);
    double lo = data_lo - margin * range;
    double hi = data_hi + margin * range;
    if (!interior.empty()) {
      const double pad = margin * range;
      lo = std::min(lo, interior.front() - pad);
      hi = std::max(hi, interior.back() + pad);
    }
    return SplineBasis(degree, std::move(interior), lo, hi, drop_leading, KnotLayout::clamped);
  }

  int degree() const { return degree_; }
  const std::vector<double> &interior_knots() const { return interior_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  int drop_leading() const { return drop_; }
  KnotLayout layout() const { return layout_; }
  /// Full knot vector (with repeated ends for the clamped layout).
  const std::vector<double> &knots() const { return knots_; }
  /// Basis dimension M.
  int size() const { return n_full_ - drop_; }

  bool contains(double x) const { return x >= lo_ && x <= hi_; }

  /// Nonzero values of the deriv-th derivative at x.
  Local local(double x, int deriv = 0) const {
    check_args(x, deriv);
    Local out;
    if (!contains(x))
      return out;
    const int p = degree_;
    const int s = find_span(x);
    double table[kMaxDegree + 1][kMaxDegree + 1];
    if (deriv == 0)
      basis_funs(x, s, table[p]);
    else
      fill_table(x, s, table);

    // padded function index k = s-p+r, full index k-p, retained k-p-drop
    const int first_full = s - p - p;
    int first = first_full - drop_;
    int skip = 0;
    if (first < 0) {
      skip = -first;
      first = 0;
    }
    const int last_full = std::min(s - p, n_full_ - 1);
    const int count = last_full - drop_ - first + 1;
    if (count <= 0)
      return out;
    out.first = first;
    out.count = count;
    for (int r = 0; r < count; ++r) {
      const int k = s - p + skip + r;
      out.values[r] = deriv == 0 ? table[p][skip + r] : derivative(table, s, p, deriv, k);
    }
    return out;
  }

  /// (phi_k^{(deriv)}(x))_{k=1..M}.
  Eigen::VectorXd eval(double x, int deriv = 0) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(size());
    const Local loc = local(x, deriv);
    for (int r = 0; r < loc.count; ++r)
      v[loc.first + r] = loc.values[r];
    return v;
  }

  /// sum_k beta_k phi_k^{(deriv)}(x) using only the nonzero functions.
  double combine(const Eigen::VectorXd &beta, double x, int deriv = 0) const {
    const Local loc = local(x, deriv);
    double acc = 0.0;
    for (int r = 0; r < loc.count; ++r)
      acc += beta[loc.first + r] * loc.values[r];
    return acc;
  }

  /// Value and first derivative of sum_k beta_k phi_k in one pass.
  std::pair<double, double> combine_with_derivative(const Eigen::VectorXd &beta, double x) const {
    if (!std::isfinite(x))
      throw InvalidInput("SplineBasis: non-finite evaluation point");
    if (!contains(x))
      return {0.0, 0.0};
    const int p = degree_;
    const int s = find_span(x);
    double table[kMaxDegree + 1][kMaxDegree + 1];
    fill_table(x, s, table);
    double v = 0.0, d = 0.0;
    for (int r = 0; r <= p; ++r) {
      const int k = s - p + r;
      const int idx = k - p - drop_;
      if (idx < 0 || idx >= size())
        continue;
      v += beta[idx] * table[p][r];
      d += beta[idx] * derivative(table, s, p, 1, k);
    }
    return {v, d};
  }

  friend bool operator==(const SplineBasis &a, const SplineBasis &b) {
    return a.degree_ == b.degree_ && a.interior_ == b.interior_ && a.lo_ == b.lo_ &&
           a.hi_ == b.hi_ && a.drop_ == b.drop_ && a.layout_ == b.layout_;
  }

private:
  void check_args(double x, int deriv) const {
    if (!std::isfinite(x))
      throw InvalidInput("SplineBasis: non-finite evaluation point");
    if (deriv < 0 || deriv > degree_)
      throw InvalidInput("SplineBasis: derivative order exceeds degree");
  }

  // Largest s with padded_[s] <= x < padded_[s+1]; x == hi maps to the last
  // nonempty span.
  int find_span(double x) const {
    const int p = degree_;
    const int hi_idx = static_cast<int>(padded_.size()) - p - 2;
    if (x >= knots_.back()) {
      int s = hi_idx;
      while (s > p && !(padded_[s] < padded_[s + 1]))
        --s;
      return s;
    }
    const auto it = std::upper_bound(padded_.begin() + p, padded_.begin() + hi_idx + 1, x);
    return static_cast<int>(it - padded_.begin()) - 1;
  }

  // Values of the p+1 degree-p functions nonzero on span s.
  void basis_funs(double x, int s, double *N) const {
    const int p = degree_;
    double left[kMaxDegree + 1], right[kMaxDegree + 1];
    N[0] = 1.0;
    for (int j = 1; j <= p; ++j) {
      left[j] = x - padded_[s + 1 - j];
      right[j] = padded_[s + j] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double temp = N[r] / (right[r + 1] + left[j - r]);
        N[r] = saved + right[r + 1] * temp;
        saved = left[j - r] * temp;
      }
      N[j] = saved;
    }
  }

  // table[q][j] = value of the degree-q function with padded index s-q+j.
  void fill_table(double x, int s, double (&table)[kMaxDegree + 1][kMaxDegree + 1]) const {
    const int p = degree_;
    double left[kMaxDegree + 1], right[kMaxDegree + 1];
    double N[kMaxDegree + 1];
    N[0] = 1.0;
    table[0][0] = 1.0;
    for (int j = 1; j <= p; ++j) {
      left[j] = x - padded_[s + 1 - j];
      right[j] = padded_[s + j] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double temp = N[r] / (right[r + 1] + left[j - r]);
        N[r] = saved + right[r + 1] * temp;
        saved = left[j - r] * temp;
      }
      N[j] = saved;
      for (int r = 0; r <= j; ++r)
        table[j][r] = N[r];
    }
  }

  // d-th derivative of the degree-q function with padded index k.
  double derivative(const double (&table)[kMaxDegree + 1][kMaxDegree + 1], int s, int q, int d,
                    int k) const {
    if (d == 0) {
      const int j = k - (s - q);
      return (j < 0 || j > q) ? 0.0 : table[q][j];
    }
    double acc = 0.0;
    const double den1 = padded_[k + q] - padded_[k];
    if (den1 > 0.0)
      acc += derivative(table, s, q - 1, d - 1, k) / den1;
    const double den2 = padded_[k + q + 1] - padded_[k + 1];
    if (den2 > 0.0)
      acc -= derivative(table, s, q - 1, d - 1, k + 1) / den2;
    return q * acc;
  }

  int degree_;
  std::vector<double> interior_;
  double lo_, hi_;
  int drop_;
  KnotLayout layout_;
  std::vector<double> knots_;
  std::vector<double> padded_;
  int n_full_ = 0;
};

/// phi(x) as a vector of length M.
inline Eigen::VectorXd eval_basis(const SplineBasis &basis, double x, int deriv_order = 0) {
  return basis.eval(x, deriv_order);
}

/// Quadratic penalty beta^T B beta, here the flatness penalty
/// lambda_R * int_A^{2A} g'(x)^2 dx.
struct PenaltyMatrix {
  Eigen::MatrixXd B;
  double lambda_R = 0.0;
  double A = 0.0;

  static PenaltyMatrix zero(int M) { return {Eigen::MatrixXd::Zero(M, M), 0.0, 0.0}; }
};

/// Gauss-Legendre assembly of lambda_R * int_A^{2A} phi'(x) phi'(x)^T dx,
/// `quad_points` nodes per knot span intersected with [A, 2A].
inline PenaltyMatrix build_flatness_penalty(const SplineBasis &basis, double A, double lambda_R,
                                            int quad_points = 4) {
  if (!(A > 0.0))
    throw InvalidInput("build_flatness_penalty: A must be positive");
  if (!(lambda_R >= 0.0))
    throw InvalidInput("build_flatness_penalty: lambda_R must be nonnegative");
  if (quad_points < 2)
    throw InvalidInput("build_flatness_penalty: need at least 2 quadrature points");
  const int M = basis.size();
  PenaltyMatrix pen{Eigen::MatrixXd::Zero(M, M), lambda_R, A};
  if (lambda_R == 0.0)
    return pen;

  const double a = std::max(A, basis.lo());
  const double b = std::min(2.0 * A, basis.hi());
  if (!(b > a))
    return pen;
  std::vector<double> breaks{a};
  for (double t : basis.knots())
    if (t > a && t < b && t != breaks.back())
      breaks.push_back(t);
  breaks.push_back(b);

  const GaussRule rule = gauss_legendre(quad_points);
  for (std::size_t s = 0; s + 1 < breaks.size(); ++s) {
    const double half = 0.5 * (breaks[s + 1] - breaks[s]);
    const double mid = 0.5 * (breaks[s + 1] + breaks[s]);
    for (int q = 0; q < quad_points; ++q) {
      const auto loc = basis.local(mid + half * rule.nodes[q], 1);
      const double w = half * rule.weights[q];
      for (int r = 0; r < loc.count; ++r)
        for (int c = 0; c < loc.count; ++c)
          pen.B(loc.first + r, loc.first + c) += w * loc.values[r] * loc.values[c];
    }
  }
  pen.B *= lambda_R;
  pen.B = 0.5 * (pen.B + pen.B.transpose()).eval();
  return pen;
}

inline void to_json(nlohmann::json &j, const SplineBasis &b) {
  j = nlohmann::json{{"degree", b.degree()},
                     {"interior_knots", b.interior_knots()},
                     {"lo", b.lo()},
                     {"hi", b.hi()},
                     {"drop_leading", b.drop_leading()},
                     {"layout", b.layout() == KnotLayout::clamped ? "clamped" : "open"}};
}

inline void from_json(const nlohmann::json &j, SplineBasis &b) {
  try {
    const std::string layout = j.value("layout", std::string("clamped"));
    if (layout != "clamped" && layout != "open")
      throw InvalidInput("basis json: layout must be 'clamped' or 'open'");
    b = SplineBasis(j.value("degree", 3), j.at("interior_knots").get<std::vector<double>>(),
                    j.at("lo").get<double>(), j.at("hi").get<double>(), j.value("drop_leading", 0),
                    layout == "open" ? KnotLayout::open : KnotLayout::clamped);
  } catch (const nlohmann::json::exception &e) {
    throw InvalidInput(std::string("basis json: ") + e.what());
  }
}

} // namespace semidyn

#endif // SEMIDYN_BASIS_HPP
