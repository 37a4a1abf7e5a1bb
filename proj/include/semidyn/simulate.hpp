#ifndef SEMIDYN_SIMULATE_HPP
#define SEMIDYN_SIMULATE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/dynamics.hpp"
#include "semidyn/parallel.hpp"

namespace semidyn {

enum class Regime { moderate, sparse, very_dense, plant };
enum class InitialDistribution { chi_square, normal, fixed };

inline const char *to_string(Regime r) {
  switch (r) {
  case Regime::moderate:
    return "moderate";
  case Regime::sparse:
    return "sparse";
  case Regime::very_dense:
    return "very_dense";
  case Regime::plant:
    return "plant";
  }
  return "?";
}

inline Regime parse_regime(const std::string &s) {
  if (s == "moderate")
    return Regime::moderate;
  if (s == "sparse")
    return Regime::sparse;
  if (s == "very_dense")
    return Regime::very_dense;
  if (s == "plant")
    return Regime::plant;
  throw InvalidInput("unknown regime '" + s + "' (moderate, sparse, very_dense, plant)");
}

inline const char *to_string(InitialDistribution d) {
  switch (d) {
  case InitialDistribution::chi_square:
    return "chi_square";
  case InitialDistribution::normal:
    return "normal";
  case InitialDistribution::fixed:
    return "fixed";
  }
  return "?";
}

struct SimDesign {
  Regime regime = Regime::moderate;
  int n = 10;
  int N = 20;
  int m_lo = 5;
  int m_hi = 20;
  SplineBasis basis = SplineBasis::uniform_open(4);
  Eigen::VectorXd beta = (Eigen::VectorXd(4) << 0.1, 1.2, 1.6, 0.4).finished();
  double sigma_theta = 0.1;
  double alpha = 0.25;
  double sigma_a = 0.05;
  InitialDistribution a_dist = InitialDistribution::chi_square;
  double sigma_eps = 0.01;
  double h = 5e-4;

  /// Scale and degrees of freedom of the chi-square law with mean alpha
  /// and standard deviation sigma_a.
  double c_a() const { return sigma_a * sigma_a / (2.0 * alpha); }
  double k_a() const { return alpha / c_a(); }
};

inline void check_design(const SimDesign &d) {
  if (d.n < 1 || d.N < 1)
    throw InvalidInput("design: need at least one subject and one curve");
  if (d.m_lo < 2 || d.m_hi < d.m_lo)
    throw InvalidInput("design: need 2 <= m_lo <= m_hi");
  if (d.beta.size() != d.basis.size())
    throw InvalidInput("design: beta does not match the basis");
  if (!(d.sigma_theta >= 0.0) || !(d.sigma_a >= 0.0) || !(d.sigma_eps >= 0.0))
    throw InvalidInput("design: standard deviations must be >= 0");
  if (d.a_dist == InitialDistribution::chi_square && (!(d.alpha > 0.0) || !(d.sigma_a > 0.0)))
    throw InvalidInput("design: chi-square initial values need alpha > 0 and sigma_a > 0");
  grid_steps(d.h);
}

/// Plant-like growth: g vanishes with its slope at 0, rises, then levels off.
inline SimDesign plant_design() {
  SimDesign d;
  d.regime = Regime::plant;
  d.n = 8;
  d.N = 6;
  d.m_lo = 8;
  d.m_hi = 15;
  d.basis = SplineBasis(3, {0.5, 1.0, 1.5}, 0.0, 2.5, 2);
  d.beta = (Eigen::VectorXd(5) << 0.9, 1.4, 0.9, 0.3, 0.1).finished();
  d.sigma_theta = 0.1;
  d.alpha = 0.3;
  d.sigma_a = 0.05;
  d.sigma_eps = 0.01;
  return d;
}

inline SimDesign default_design(Regime regime) {
  SimDesign d;
  d.regime = regime;
  switch (regime) {
  case Regime::moderate:
    break;
  case Regime::sparse:
    d.m_lo = 3;
    d.m_hi = 8;
    break;
  case Regime::very_dense:
    d.N = 1;
    d.m_lo = 60;
    d.m_hi = 100;
    d.sigma_theta = 0.0;
    break;
  case Regime::plant:
    return plant_design();
  }
  return d;
}

struct SimTruth {
  Eigen::VectorXd beta;
  SplineBasis basis;
  Eigen::VectorXd theta;
  std::vector<std::vector<double>> a;
  std::vector<std::vector<std::vector<double>>> noiseless; // X at the measurement times
  std::uint64_t seed = 0;

  GradientFunction g() const { return GradientFunction(basis, beta); }
  /// Initial state holding the true theta, a and beta.
  ParameterState state() const {
    ParameterState st{beta, theta, a, 0.0};
    st.alpha = st.mean_a();
    return st;
  }
};

struct Simulated {
  Dataset data;
  SimTruth truth;
};

constexpr const char *kGeneratorName = "mt19937_64/seed_seq";

/// Subject stream (seed, i) draws theta_i; curve stream (seed, i, l) draws
/// a_il, m_il, the times and the noise, in that order.
inline Simulated generate(const SimDesign &design, std::uint64_t seed, int threads = 1) {
  check_design(design);
  const auto lo32 = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  const auto hi32 = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  const GradientFunction g(design.basis, design.beta);
  SolverSettings settings;
  settings.h = design.h;

  Simulated out;
  out.truth.beta = design.beta;
  out.truth.basis = design.basis;
  out.truth.seed = seed;
  out.truth.theta.resize(design.n);
  for (int i = 0; i < design.n; ++i) {
    std::seed_seq seq{lo32(seed), hi32(seed), static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> z(0.0, 1.0);
    out.truth.theta[i] = design.sigma_theta * z(rng);
  }

  const std::size_t total = static_cast<std::size_t>(design.n) * design.N;
  std::vector<Curve> curves(total);
  std::vector<double> a(total);
  std::vector<std::vector<double>> clean(total);
  parallel_for(total, threads, [&](std::size_t c) {
    const int i = static_cast<int>(c / design.N);
    const int l = static_cast<int>(c % design.N);
    std::seed_seq seq{lo32(seed), hi32(seed), static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(l)};
    std::mt19937_64 rng(seq);
    switch (design.a_dist) {
    case InitialDistribution::chi_square: {
      std::chi_squared_distribution<double> chi(design.k_a());
      a[c] = design.c_a() * chi(rng);
      break;
    }
    case InitialDistribution::normal: {
      std::normal_distribution<double> z(design.alpha, design.sigma_a);
      a[c] = z(rng);
      break;
    }
    case InitialDistribution::fixed:
      a[c] = design.alpha;
      break;
    }
    std::uniform_int_distribution<int> count(design.m_lo, design.m_hi);
    const int m = count(rng);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> times;
    do {
      times.resize(m);
      for (auto &t : times)
        t = unif(rng);
      std::sort(times.begin(), times.end());
    } while (std::adjacent_find(times.begin(), times.end()) != times.end());

    const double theta = out.truth.theta[i];
    const std::string label = "S" + std::to_string(i + 1) + "/C" + std::to_string(l + 1);
    const CurveSolution sol = solve_trajectory(g, a[c], theta, settings, label);
    clean[c] = eval_at_times(sol, g, theta, times);
    std::normal_distribution<double> noise(0.0, 1.0);
    Curve curve;
    curve.id = "C" + std::to_string(l + 1);
    curve.times = times;
    curve.values.resize(m);
    for (int j = 0; j < m; ++j)
      curve.values[j] = clean[c][j] + design.sigma_eps * noise(rng);
    curves[c] = std::move(curve);
  });

  out.truth.a.assign(design.n, {});
  out.truth.noiseless.assign(design.n, {});
  for (int i = 0; i < design.n; ++i) {
    Subject s;
    s.id = "S" + std::to_string(i + 1);
    for (int l = 0; l < design.N; ++l) {
      const std::size_t c = static_cast<std::size_t>(i) * design.N + l;
      s.curves.push_back(std::move(curves[c]));
      out.truth.a[i].push_back(a[c]);
      out.truth.noiseless[i].push_back(std::move(clean[c]));
    }
    out.data.subjects.push_back(std::move(s));
  }
  return out;
}

inline nlohmann::json design_to_json(const SimDesign &d) {
  return {{"regime", to_string(d.regime)},
          {"n", d.n},
          {"N", d.N},
          {"m_range", {d.m_lo, d.m_hi}},
          {"basis", d.basis},
          {"beta", std::vector<double>(d.beta.data(), d.beta.data() + d.beta.size())},
          {"sigma_theta", d.sigma_theta},
          {"alpha", d.alpha},
          {"sigma_a", d.sigma_a},
          {"a_dist", to_string(d.a_dist)},
          {"c_a", d.a_dist == InitialDistribution::chi_square ? d.c_a() : 0.0},
          {"k_a", d.a_dist == InitialDistribution::chi_square ? d.k_a() : 0.0},
          {"sigma_eps", d.sigma_eps},
          {"h", d.h},
          {"generator", kGeneratorName}};
}

/// Ground-truth sidecar; a is keyed by subject and curve id.
inline nlohmann::json truth_to_json(const Simulated &sim, const SimDesign &design) {
  nlohmann::json a = nlohmann::json::object();
  for (std::size_t i = 0; i < sim.data.n_subjects(); ++i) {
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t l = 0; l < sim.data.subjects[i].curves.size(); ++l)
      row[sim.data.subjects[i].curves[l].id] = sim.truth.a[i][l];
    a[sim.data.subjects[i].id] = row;
  }
  nlohmann::json theta = nlohmann::json::object();
  for (std::size_t i = 0; i < sim.data.n_subjects(); ++i)
    theta[sim.data.subjects[i].id] = sim.truth.theta[static_cast<Eigen::Index>(i)];
  const auto &b = sim.truth.beta;
  return {{"beta", std::vector<double>(b.data(), b.data() + b.size())},
          {"basis", sim.truth.basis},
          {"knots", sim.truth.basis.interior_knots()},
          {"theta", theta},
          {"a", a},
          {"seed", sim.truth.seed},
          {"design", design_to_json(design)}};
}

/// Known initial values (and truth theta, beta) for `ds` from a sidecar,
/// matched by subject and curve id.
inline ParameterState truth_state_from_json(const nlohmann::json &j, const Dataset &ds) {
  ParameterState st;
  const auto beta = j.at("beta").get<std::vector<double>>();
  st.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
  st.theta.resize(static_cast<Eigen::Index>(ds.n_subjects()));
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    const auto &sid = ds.subjects[i].id;
    if (!j.at("theta").contains(sid) || !j.at("a").contains(sid))
      throw InvalidInput("truth file has no entry for subject '" + sid + "'");
    st.theta[static_cast<Eigen::Index>(i)] = j.at("theta").at(sid).get<double>();
    std::vector<double> row;
    for (const auto &c : ds.subjects[i].curves) {
      if (!j.at("a").at(sid).contains(c.id))
        throw InvalidInput("truth file has no initial value for curve '" + sid + "/" + c.id + "'");
      row.push_back(j.at("a").at(sid).at(c.id).get<double>());
    }
    st.a.push_back(std::move(row));
  }
  st.alpha = st.mean_a();
  return st;
}

} // namespace semidyn

#endif // SEMIDYN_SIMULATE_HPP
