#ifndef SEMIDYN_REPORT_HPP
#define SEMIDYN_REPORT_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/optimizer.hpp"
#include "semidyn/selection.hpp"

namespace semidyn {

constexpr const char *kVersion = "semidyn 1.0.0";

inline std::vector<double> to_vector(const Eigen::VectorXd &v) { return {v.data(), v.data() + v.size()}; }

inline nlohmann::json to_json(const Eigen::MatrixXd &m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json to_json(const LossBreakdown &l) {
  return {{"sse", l.sse}, {"pen_a", l.pen_a}, {"pen_theta", l.pen_theta}, {"pen_beta", l.pen_beta}, {"total", l.total}};
}

inline nlohmann::json fit_to_json(const Dataset &ds, const FitResult &res, const SplineBasis &basis,
                                  const PenaltyMatrix &B) {
  nlohmann::json theta = nlohmann::json::object(), a = nlohmann::json::object();
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    const auto &s = ds.subjects[i];
    theta[s.id] = res.state.theta[static_cast<Eigen::Index>(i)];
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t l = 0; l < s.curves.size(); ++l)
      row[s.curves[l].id] = res.state.a[i][l];
    a[s.id] = row;
  }
  nlohmann::json trace = nlohmann::json::array();
  for (const auto &t : res.loss_trace)
    trace.push_back({{"phase", t.phase},
                     {"iteration", t.iteration},
                     {"loss", to_json(t.loss)},
                     {"lambda1", t.lambda1},
                     {"lambda2", t.lambda2},
                     {"lambda3", t.lambda3},
                     {"max_step", t.max_step}});
  nlohmann::json j;
  j["converged"] = res.converged;
  j["n_lm"] = res.n_lm;
  j["n_nr"] = res.n_nr;
  j["basis"] = basis;
  j["flatness_penalty"] = {{"A", B.A}, {"lambda_R", B.lambda_R}};
  j["beta"] = to_vector(res.state.beta);
  j["theta"] = theta;
  j["a"] = a;
  j["alpha"] = res.state.alpha;
  j["penalties"] = {{"lambda1", res.penalties.lambda1},
                    {"lambda2", res.penalties.lambda2},
                    {"lambda3_0", res.penalties.lambda3_0},
                    {"a_known", res.penalties.a_known}};
  j["variances"] = {{"sigma_eps2", res.variances.sigma_eps2},
                    {"sigma_a2", res.variances.sigma_a2},
                    {"sigma_theta2", res.variances.sigma_theta2},
                    {"estimated", res.variances_estimated}};
  j["loss"] = to_json(res.final_loss());
  j["Wn"] = res.Wn.size() ? to_json(res.Wn) : nlohmann::json(nullptr);
  j["Wn_condition"] = std::isfinite(res.wn_condition) ? nlohmann::json(res.wn_condition) : nlohmann::json(nullptr);
  j["se_note"] = res.penalties.a_known ? "initial values known" : "approximate: initial values estimated";
  j["variational_curves"] = res.variational_curves;
  j["left_support_curves"] = res.left_support_curves;
  j["trace"] = trace;
  j["diagnostics"] = res.diagnostics;
  j["time_map"] = {{"offset", ds.time_map.offset}, {"scale", ds.time_map.scale}, {"applied", ds.time_map.applied}};
  return j;
}

inline nlohmann::json cv_to_json(const Dataset &ds, const CVReport &cv) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto &pc : cv.per_curve)
    per.push_back({{"subject", ds.subjects[pc.subject].id},
                   {"curve", ds.subjects[pc.subject].curves[pc.curve].id},
                   {"contribution", pc.value},
                   {"ok", pc.ok}});
  return {{"score", cv.score}, {"degraded", cv.degraded}, {"per_curve", per}, {"warnings", cv.warnings}};
}

/// 64-bit FNV-1a digest of a byte string, as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw InvalidInput("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path &path, const std::string &text) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw InvalidInput("cannot write '" + path.string() + "'");
  out << text;
}

/// Flat key=value configuration. '#' starts a comment; keys may use '-' or '_'.
inline std::map<std::string, std::string> parse_config(std::istream &in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++no;
    if (const auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("config line " + std::to_string(no) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key.empty())
      throw InvalidInput("config line " + std::to_string(no) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

} // namespace semidyn

#endif // SEMIDYN_REPORT_HPP
