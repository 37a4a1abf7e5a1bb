// Command-line front end: simulate, fit, select, two-stage, compare.
//
// Exit codes: 0 success, 1 bad input, 2 model error, 3 fit did not converge.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "semidyn/semidyn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semidyn;

namespace {

constexpr int kOk = 0, kBadInput = 1, kModelError = 2, kNotConverged = 3;

struct Common {
  int threads = 1;
  bool record_time = false;
};

/// Basis and flatness-penalty flags shared by fit and two-stage.
struct BasisFlags {
  int M = 4;
  std::vector<double> knots;
  std::optional<double> lo, hi;
  int degree = 3;
  int drop_leading = 0;
  double A = 0.5;
  double lambda_R = 0.0;

  void add(CLI::App *app) {
    app->add_option("--M", M, "number of basis functions for the uniform layout (knots 0.1 + j/M)")
        ->check(CLI::Range(1, 100));
    app->add_option("--knots", knots, "interior knots of a clamped basis (overrides --M)")->delimiter(',');
    app->add_option("--lo", lo, "lower boundary of the clamped basis (default: data range widened)");
    app->add_option("--hi", hi, "upper boundary of the clamped basis");
    app->add_option("--degree", degree, "spline degree")->check(CLI::Range(1, 5));
    app->add_option("--drop-leading", drop_leading, "drop 0, 1 or 2 leading functions of a clamped basis")
        ->check(CLI::Range(0, 2));
    app->add_option("--A", A, "flatness penalty acts on [A, 2A]");
    app->add_option("--lambdaR", lambda_R, "flatness penalty weight");
  }

  SplineBasis build(const Dataset &ds) const {
    if (knots.empty() && !lo && !hi) {
      if (drop_leading != 0)
        throw InvalidInput("--drop-leading needs a clamped basis (--knots or --lo/--hi)");
      return SplineBasis::uniform_open(M, 0.1, 1.0, degree);
    }
    const auto [vlo, vhi] = ds.value_range();
    SplineBasis cover = SplineBasis::covering(degree, knots, vlo, vhi, drop_leading);
    return SplineBasis(degree, knots, lo.value_or(cover.lo()), hi.value_or(cover.hi()), drop_leading);
  }

  json to_json() const {
    json j{{"M", M}, {"knots", knots}, {"degree", degree}, {"drop_leading", drop_leading}, {"A", A},
           {"lambda_R", lambda_R}};
    j["lo"] = lo ? json(*lo) : json(nullptr);
    j["hi"] = hi ? json(*hi) : json(nullptr);
    return j;
  }
};

struct FitFlags {
  double lambda1 = 0.04;
  double lambda2 = 0.01;
  double lambda3 = 1.0;
  bool adaptive_lm = false;
  bool adaptive_nr = true;
  bool a_known = false;
  std::string truth;
  double h = 5e-4;
  int max_lm = 200;
  int max_nr = 5;
  double tol_rel = 1e-8;
  double tol_param = 1e-6;

  void add(CLI::App *app) {
    app->add_option("--lambda1", lambda1, "initial-value penalty");
    app->add_option("--lambda2", lambda2, "scale-parameter penalty");
    app->add_option("--lambda3", lambda3, "initial LM damping (divided by the sweep index)");
    app->add_option("--adaptive-lm", adaptive_lm, "re-estimate lambda1, lambda2 during LM sweeps (true/false)");
    app->add_option("--adaptive-nr", adaptive_nr, "re-estimate lambda1, lambda2 during Newton steps (true/false)");
    app->add_flag("--a-known", a_known, "treat initial values as known (read from the truth file)");
    app->add_option("--truth", truth, "ground-truth JSON (default: truth.json next to the data)");
    app->add_option("--grid-h", h, "integration step (1/h must be an integer)");
    app->add_option("--max-lm", max_lm, "maximum LM sweeps");
    app->add_option("--max-nr", max_nr, "maximum Newton steps per polish");
    app->add_option("--tol-rel", tol_rel, "relative objective tolerance");
    app->add_option("--tol-param", tol_param, "parameter change tolerance");
  }

  PenaltySettings penalties() const {
    PenaltySettings p;
    p.lambda1 = lambda1;
    p.lambda2 = lambda2;
    p.lambda3_0 = lambda3;
    p.a_known = a_known;
    p.adaptive = adaptive_lm || adaptive_nr;
    return p;
  }

  FitOptions options(int threads) const {
    FitOptions o;
    o.max_lm_iters = max_lm;
    o.max_nr_iters = max_nr;
    o.tol_rel_obj = tol_rel;
    o.tol_param = tol_param;
    o.adaptive_lm = adaptive_lm;
    o.adaptive_nr = adaptive_nr;
    o.solver.h = h;
    o.solver.threads = threads;
    return o;
  }

  json to_json() const {
    return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"lambda3", lambda3}, {"adaptive_lm", adaptive_lm},
            {"adaptive_nr", adaptive_nr}, {"a_known", a_known}, {"truth", truth}, {"grid_h", h},
            {"max_lm", max_lm}, {"max_nr", max_nr}, {"tol_rel", tol_rel}, {"tol_param", tol_param}};
  }

  fs::path truth_path(const fs::path &data) const {
    return truth.empty() ? data.parent_path() / "truth.json" : fs::path(truth);
  }

  /// Initial state: beta = 1, theta = 0 and a from the truth file when known.
  std::optional<ParameterState> init(const Dataset &ds, const fs::path &data, int M) const {
    if (!a_known)
      return std::nullopt;
    const fs::path p = truth_path(data);
    if (!fs::exists(p))
      throw InvalidInput("--a-known needs a truth file; '" + p.string() + "' not found");
    ParameterState st = truth_state_from_json(json::parse(read_file(p)), ds);
    st.beta = Eigen::VectorXd::Ones(M);
    st.theta.setZero();
    return st;
  }
};

class Manifest {
public:
  Manifest(std::string command, const Common &common) : command_(std::move(command)), common_(common) {
    start_ = std::chrono::steady_clock::now();
  }
  void config(const std::string &key, json value) { config_[key] = std::move(value); }
  void input(const fs::path &p) { inputs_[p.generic_string()] = fnv1a_hex(read_file(p)); }
  void seed(std::uint64_t s) { seed_ = s; }

  void write(const fs::path &dir) const {
    json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["config"] = config_;
    j["inputs"] = inputs_;
    j["seed"] = seed_ ? json(*seed_) : json(nullptr);
    j["generator"] = kGeneratorName;
    if (common_.record_time)
      j["wall_time_s"] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_file(dir / "manifest.json", j.dump(2) + "\n");
  }

private:
  std::string command_;
  const Common &common_;
  json config_ = json::object();
  json inputs_ = json::object();
  std::optional<std::uint64_t> seed_;
  std::chrono::steady_clock::time_point start_;
};

std::vector<double> grid_for(const Dataset &ds, std::optional<double> lo, std::optional<double> hi, int n) {
  auto [vlo, vhi] = ds.value_range();
  return linspace(lo.value_or(vlo), hi.value_or(vhi), n);
}

// ---------------------------------------------------------------- simulate

struct SimulateCmd {
  std::string regime = "moderate";
  std::uint64_t seed = 1;
  std::string out = "sim";
  std::optional<int> n, N;
  std::optional<double> sigma_eps, sigma_theta;

  void add(CLI::App *app) {
    app->add_option("--regime", regime, "moderate, sparse, very_dense or plant")
        ->check(CLI::IsMember({"moderate", "sparse", "very_dense", "plant"}));
    app->add_option("--seed", seed, "random seed");
    app->add_option("--out", out, "output directory");
    app->add_option("--n", n, "override: number of subjects");
    app->add_option("--N", N, "override: curves per subject");
    app->add_option("--sigma-eps", sigma_eps, "override: noise standard deviation");
    app->add_option("--sigma-theta", sigma_theta, "override: scale-parameter standard deviation");
  }

  int run(const Common &common) const {
    SimDesign d = default_design(parse_regime(regime));
    if (n)
      d.n = *n;
    if (N)
      d.N = *N;
    if (sigma_eps)
      d.sigma_eps = *sigma_eps;
    if (sigma_theta)
      d.sigma_theta = *sigma_theta;
    const Simulated sim = generate(d, seed, common.threads);
    const fs::path dir(out);
    fs::create_directories(dir);
    std::ostringstream csv;
    write_csv(csv, sim.data);
    write_file(dir / "data.csv", csv.str());
    write_file(dir / "truth.json", truth_to_json(sim, d).dump(2) + "\n");
    Manifest m("simulate", common);
    m.config("design", design_to_json(d));
    m.seed(seed);
    m.write(dir);
    std::cout << "simulated " << sim.data.n_subjects() << " subjects, " << sim.data.n_curves() << " curves, "
              << sim.data.n_measurements() << " measurements -> " << dir.string() << "\n";
    return kOk;
  }
};

// --------------------------------------------------------------------- fit

struct FitCmd {
  std::string data;
  std::string out = "fit";
  BasisFlags basis;
  FitFlags flags;
  std::optional<double> grid_lo, grid_hi;
  int grid_n = 201;

  void add(CLI::App *app) {
    app->add_option("--data", data, "data file (CSV or JSON)")->required();
    app->add_option("--out", out, "output directory");
    basis.add(app);
    flags.add(app);
    app->add_option("--grid-lo", grid_lo, "lower end of the output grid for g");
    app->add_option("--grid-hi", grid_hi, "upper end of the output grid for g");
    app->add_option("--grid-n", grid_n, "points on the output grid")->check(CLI::Range(2, 100000));
  }

  int run(const Common &common) const {
    const Dataset ds = load_dataset(data);
    const SplineBasis b = basis.build(ds);
    const PenaltyMatrix B = build_flatness_penalty(b, basis.A, basis.lambda_R);
    const FitOptions opts = flags.options(common.threads);
    const FitResult res = fit(ds, b, B, flags.penalties(), opts, flags.init(ds, data, b.size()));

    const fs::path dir(out);
    fs::create_directories(dir);
    write_file(dir / "fit.json", fit_to_json(ds, res, b, B).dump(2) + "\n");
    std::ostringstream csv;
    write_se_csv(csv, GradientFunction(b, res.state.beta), res.Wn, res.variances.sigma_eps2,
                 grid_for(ds, grid_lo, grid_hi, grid_n));
    write_file(dir / "g_hat.csv", csv.str());
    Manifest m("fit", common);
    m.config("basis", basis.to_json());
    m.config("fit", flags.to_json());
    m.config("grid", {{"n", grid_n}});
    m.input(data);
    if (flags.a_known)
      m.input(flags.truth_path(data));
    m.write(dir);
    std::cout << (res.converged ? "converged" : "NOT converged") << " after " << res.n_lm << " LM sweeps and "
              << res.n_nr << " Newton steps; objective " << res.final_loss().total << "\n";
    return res.converged ? kOk : kNotConverged;
  }
};

// ------------------------------------------------------------------ select

struct SelectCmd {
  std::string data;
  std::string candidates_file;
  std::vector<int> M_list{2, 3, 4, 5, 6};
  std::string out = "select";
  FitFlags flags;

  void add(CLI::App *app) {
    app->add_option("--data", data, "data file")->required();
    app->add_option("--candidates-file", candidates_file,
                    "JSON list of {M} or {knots, lo, hi, degree, drop_leading} with optional A, lambda_R");
    app->add_option("--M-list", M_list, "uniform-layout candidates when no file is given")->delimiter(',');
    app->add_option("--out", out, "output directory");
    flags.add(app);
  }

  std::vector<Candidate> candidates(const Dataset &ds) const {
    std::vector<Candidate> out_list;
    if (candidates_file.empty()) {
      for (int M : M_list)
        out_list.push_back({SplineBasis::uniform_open(M), 0.5, 0.0, "M=" + std::to_string(M)});
      return out_list;
    }
    const json j = json::parse(read_file(candidates_file));
    if (!j.is_array() || j.empty())
      throw InvalidInput("candidates file must be a non-empty JSON array");
    for (const auto &c : j) {
      Candidate cand;
      cand.A = c.value("A", 0.5);
      cand.lambda_R = c.value("lambda_R", 0.0);
      if (c.contains("knots")) {
        const auto knots = c.at("knots").get<std::vector<double>>();
        const int degree = c.value("degree", 3);
        const int drop = c.value("drop_leading", 0);
        const auto [vlo, vhi] = ds.value_range();
        const SplineBasis cover = SplineBasis::covering(degree, knots, vlo, vhi, drop);
        cand.basis = SplineBasis(degree, knots, c.value("lo", cover.lo()), c.value("hi", cover.hi()), drop);
      } else {
        cand.basis = SplineBasis::uniform_open(c.at("M").get<int>());
      }
      std::ostringstream name;
      name << (c.contains("name") ? c.at("name").get<std::string>() : "M=" + std::to_string(cand.basis.size()))
           << " A=" << cand.A << " lambdaR=" << cand.lambda_R;
      cand.name = name.str();
      out_list.push_back(std::move(cand));
    }
    return out_list;
  }

  int run(const Common &common) const {
    const Dataset ds = load_dataset(data);
    const std::vector<Candidate> cands = candidates(ds);
    std::optional<ParameterState> truth;
    if (flags.a_known)
      truth = flags.init(ds, data, 1);
    std::function<ParameterState(const SplineBasis &)> init;
    if (truth)
      init = [&](const SplineBasis &b) {
        ParameterState st = *truth;
        st.beta = Eigen::VectorXd::Ones(b.size());
        return st;
      };
    const auto ranked = select_model(ds, cands, flags.penalties(), flags.options(1), init, common.threads);

    json table = json::array();
    std::ostringstream csv;
    csv << "rank,candidate,M,A,lambda_R,status,cv_score,objective\n";
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const auto &rc = ranked[r];
      const std::string status = rc.failed ? "failed" : rc.fit.converged ? "converged" : "no convergence";
      const bool scored = !rc.failed && rc.fit.converged;
      csv << r + 1 << ',' << rc.candidate.name << ',' << rc.candidate.basis.size() << ','
          << detail::format_double(rc.candidate.A) << ',' << detail::format_double(rc.candidate.lambda_R) << ','
          << status << ',' << (scored ? detail::format_double(rc.cv.score) : "") << ','
          << (rc.failed ? "" : detail::format_double(rc.fit.final_loss().total)) << '\n';
      json e{{"rank", r + 1}, {"candidate", rc.candidate.name}, {"basis", rc.candidate.basis},
             {"A", rc.candidate.A}, {"lambda_R", rc.candidate.lambda_R}, {"status", status}};
      if (!rc.failed) {
        e["beta"] = to_vector(rc.fit.state.beta);
        e["cv"] = cv_to_json(ds, rc.cv);
      } else {
        e["error"] = rc.error;
      }
      table.push_back(std::move(e));
    }
    const fs::path dir(out);
    fs::create_directories(dir);
    write_file(dir / "ranking.json", table.dump(2) + "\n");
    write_file(dir / "ranking.csv", csv.str());
    Manifest m("select", common);
    m.config("fit", flags.to_json());
    m.config("M_list", M_list);
    m.input(data);
    if (!candidates_file.empty())
      m.input(candidates_file);
    m.write(dir);
    std::cout << csv.str();
    return kOk;
  }
};

// --------------------------------------------------------------- two-stage

Stage2Method parse_stage2(const std::string &s) {
  return s == "basis" ? Stage2Method::basis_regression : Stage2Method::local_quadratic;
}

json ise_json(const std::vector<double> &ise) {
  json j = json::object();
  const auto regions = default_regions();
  for (std::size_t k = 0; k < regions.size(); ++k)
    j[regions[k].name] = ise[k];
  return j;
}

struct TwoStageCmd {
  std::string data;
  std::string out = "two_stage";
  std::string stage2 = "local-quadratic";
  int M = 4;
  std::string truth;
  std::optional<double> grid_lo, grid_hi;
  int grid_n = 201;

  void add(CLI::App *app) {
    app->add_option("--data", data, "data file")->required();
    app->add_option("--out", out, "output directory");
    app->add_option("--stage2", stage2, "local-quadratic or basis")
        ->check(CLI::IsMember({"local-quadratic", "basis"}));
    app->add_option("--M", M, "uniform-layout basis size for --stage2 basis");
    app->add_option("--truth", truth, "ground-truth JSON; enables the region ISE report");
    app->add_option("--grid-lo", grid_lo, "lower end of the output grid");
    app->add_option("--grid-hi", grid_hi, "upper end of the output grid");
    app->add_option("--grid-n", grid_n, "points on the output grid")->check(CLI::Range(2, 100000));
  }

  int run(const Common &common) const {
    const Dataset ds = load_dataset(data);
    TwoStageOptions opts;
    opts.stage2 = parse_stage2(stage2);
    opts.basis = SplineBasis::uniform_open(M);
    opts.threads = common.threads;
    const TwoStageResult res = two_stage(ds, opts);

    const fs::path dir(out);
    fs::create_directories(dir);
    std::ostringstream csv;
    csv << "x,g_hat\n";
    for (double x : grid_for(ds, grid_lo, grid_hi, grid_n))
      csv << detail::format_double(x) << ',' << detail::format_double(res.value(x)) << '\n';
    write_file(dir / "g_hat.csv", csv.str());
    Manifest m("two-stage", common);
    m.config("stage2", stage2);
    m.config("M", M);
    m.input(data);
    json summary{{"smoothed_curves", res.smoothed}, {"skipped_curves", res.skipped}, {"warnings", res.warnings},
                 {"kernel", "epanechnikov"}, {"bandwidth_grid", "geometric, 15 points, [0.05, 1] x range"}};
    if (opts.stage2 == Stage2Method::local_quadratic)
      summary["stage2_bandwidth"] = res.fit.bandwidth;
    if (!truth.empty()) {
      const json tj = json::parse(read_file(truth));
      SplineBasis tb = tj.at("basis").get<SplineBasis>();
      const auto beta = tj.at("beta").get<std::vector<double>>();
      const GradientFunction g(tb, Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size())));
      const auto ise = region_ise([&](double x) { return res.value(x); }, [&](double x) { return g.value(x); },
                                  default_regions());
      write_file(dir / "ise.json", ise_json(ise).dump(2) + "\n");
      m.input(truth);
    }
    write_file(dir / "summary.json", summary.dump(2) + "\n");
    m.write(dir);
    std::cout << "two-stage fit from " << res.smoothed << " curves -> " << dir.string() << "\n";
    return kOk;
  }
};

// ----------------------------------------------------------------- compare

struct Stats {
  double mean = 0, median = 0, sd = 0;
};

Stats summarize(std::vector<double> v) {
  Stats s;
  if (v.empty())
    return s;
  for (double x : v)
    s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v)
    s.sd += (x - s.mean) * (x - s.mean);
  s.sd = v.size() > 1 ? std::sqrt(s.sd / static_cast<double>(v.size() - 1)) : 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  s.median = v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
  return s;
}

struct CompareCmd {
  std::string regime = "sparse";
  int replicates = 10;
  std::uint64_t seed = 1;
  std::string out = "compare";
  FitFlags flags;

  void add(CLI::App *app) {
    app->add_option("--regime", regime, "simulation regime")
        ->check(CLI::IsMember({"moderate", "sparse", "very_dense"}));
    app->add_option("--replicates", replicates, "number of simulated data sets")->check(CLI::Range(1, 10000));
    app->add_option("--seed", seed, "base seed; replicate r uses seed + r");
    app->add_option("--out", out, "output directory");
    flags.add(app);
  }

  int run(const Common &common) const {
    const SimDesign design = default_design(parse_regime(regime));
    const auto regions = default_regions();
    const std::vector<std::string> methods{"hierarchical", "two_stage_basis", "two_stage_local_quadratic"};
    std::vector<std::vector<double>> ise(static_cast<std::size_t>(replicates) * methods.size());
    std::vector<char> converged(static_cast<std::size_t>(replicates), 0);
    const GradientFunction g_true(design.basis, design.beta);
    auto truth_fn = [&](double x) { return g_true.value(x); };

    parallel_for(static_cast<std::size_t>(replicates), common.threads, [&](std::size_t r) {
      const Simulated sim = generate(design, seed + r);
      const SplineBasis b = design.basis;
      const PenaltyMatrix B = PenaltyMatrix::zero(b.size());
      std::optional<ParameterState> init;
      if (flags.a_known) {
        ParameterState st = sim.truth.state();
        st.beta = Eigen::VectorXd::Ones(b.size());
        st.theta.setZero();
        init = st;
      }
      const FitResult res = fit(sim.data, b, B, flags.penalties(), flags.options(1), init);
      converged[r] = res.converged;
      const GradientFunction g_hat(b, res.state.beta);
      ise[r * 3] = region_ise([&](double x) { return g_hat.value(x); }, truth_fn, regions);
      TwoStageOptions opts;
      opts.basis = b;
      opts.stage2 = Stage2Method::basis_regression;
      const TwoStageResult ts_basis = two_stage(sim.data, opts);
      ise[r * 3 + 1] = region_ise([&](double x) { return ts_basis.value(x); }, truth_fn, regions);
      opts.stage2 = Stage2Method::local_quadratic;
      const TwoStageResult ts_lq = two_stage(sim.data, opts);
      ise[r * 3 + 2] = region_ise([&](double x) { return ts_lq.value(x); }, truth_fn, regions);
    });

    std::ostringstream per, table;
    per << "replicate,seed,method,converged";
    table << "method,region,mean,median,sd\n";
    for (const auto &reg : regions)
      per << ",ise_" << reg.name;
    per << '\n';
    for (int r = 0; r < replicates; ++r)
      for (std::size_t k = 0; k < methods.size(); ++k) {
        per << r + 1 << ',' << seed + static_cast<std::uint64_t>(r) << ',' << methods[k] << ','
            << (k == 0 ? (converged[static_cast<std::size_t>(r)] ? "true" : "false") : "") ;
        for (double v : ise[static_cast<std::size_t>(r) * 3 + k])
          per << ',' << detail::format_double(v);
        per << '\n';
      }
    for (std::size_t k = 0; k < methods.size(); ++k)
      for (std::size_t q = 0; q < regions.size(); ++q) {
        std::vector<double> col;
        for (int r = 0; r < replicates; ++r)
          col.push_back(ise[static_cast<std::size_t>(r) * 3 + k][q]);
        const Stats s = summarize(col);
        table << methods[k] << ',' << regions[q].name << ',' << detail::format_double(s.mean) << ','
              << detail::format_double(s.median) << ',' << detail::format_double(s.sd) << '\n';
      }
    const fs::path dir(out);
    fs::create_directories(dir);
    write_file(dir / "ise_replicates.csv", per.str());
    write_file(dir / "ise_summary.csv", table.str());
    Manifest m("compare", common);
    m.config("design", design_to_json(design));
    m.config("replicates", replicates);
    m.config("fit", flags.to_json());
    m.seed(seed);
    m.write(dir);
    std::cout << table.str();
    return kOk;
  }
};

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Semiparametric ODE gradient-function estimation from sparse, noisy curves.\n"
               "Exit codes: 0 success, 1 bad input, 2 model error, 3 fit did not converge."};
  app.set_version_flag("--version", std::string(kVersion));
  app.set_config("--config", "", "flat key=value configuration file; command-line flags take precedence");
  app.require_subcommand(1);
  Common common;
  app.add_option("--threads", common.threads, "worker threads (results do not depend on it)")
      ->check(CLI::Range(1, 1024));
  app.add_flag("--record-time", common.record_time, "store wall time in the manifest (breaks byte identity)");

  SimulateCmd sim;
  FitCmd fitc;
  SelectCmd sel;
  TwoStageCmd two;
  CompareCmd cmp;
  sim.add(app.add_subcommand("simulate", "generate a synthetic data set with ground truth"));
  fitc.add(app.add_subcommand("fit", "fit the model to a data file"));
  sel.add(app.add_subcommand("select", "rank candidate bases by approximate leave-one-curve-out CV"));
  two.add(app.add_subcommand("two-stage", "two-stage smoothing baseline"));
  cmp.add(app.add_subcommand("compare", "hierarchical vs two-stage region ISE over simulated replicates"));
  for (auto *sub : app.get_subcommands({}))
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadInput;
  }
  try {
    if (app.got_subcommand("simulate"))
      return sim.run(common);
    if (app.got_subcommand("fit"))
      return fitc.run(common);
    if (app.got_subcommand("select"))
      return sel.run(common);
    if (app.got_subcommand("two-stage"))
      return two.run(common);
    return cmp.run(common);
  } catch (const InvalidInput &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const ModelError &e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kModelError;
  } catch (const nlohmann::json::exception &e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  }
}
