#ifndef SEMIDYN_DATA_HPP
#define SEMIDYN_DATA_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "semidyn/error.hpp"

namespace semidyn {

struct Curve {
  std::string id;
  std::vector<double> times;
  std::vector<double> values;

  std::size_t size() const { return times.size(); }
  friend bool operator==(const Curve &, const Curve &) = default;
};

struct Subject {
  std::string id;
  std::vector<Curve> curves;

  std::size_t measurements() const {
    std::size_t m = 0;
    for (const auto &c : curves)
      m += c.size();
    return m;
  }
  friend bool operator==(const Subject &, const Subject &) = default;
};

/// Affine map raw = offset + scale * t applied when raw times leave [0, 1].
struct TimeMap {
  double offset = 0.0;
  double scale = 1.0;
  bool applied = false;

  double to_raw(double t) const { return offset + scale * t; }
  friend bool operator==(const TimeMap &, const TimeMap &) = default;
};

/// Subjects -> curves -> (time, value) measurements.
struct Dataset {
  std::vector<Subject> subjects;
  TimeMap time_map;

  std::size_t n_subjects() const { return subjects.size(); }
  std::size_t n_curves() const {
    std::size_t N = 0;
    for (const auto &s : subjects)
      N += s.curves.size();
    return N;
  }
  std::size_t n_measurements() const {
    std::size_t m = 0;
    for (const auto &s : subjects)
      m += s.measurements();
    return m;
  }
  /// Value range over all measurements.
  std::pair<double, double> value_range() const {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto &s : subjects)
      for (const auto &c : s.curves)
        for (double v : c.values) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
    return {lo, hi};
  }

  friend bool operator==(const Dataset &, const Dataset &) = default;
};

/// Flat (i, l) indexing of curves in lexicographic order.
class CurveIndex {
public:
  CurveIndex() = default;
  explicit CurveIndex(const Dataset &ds) {
    for (std::size_t i = 0; i < ds.subjects.size(); ++i) {
      subject_offset_.push_back(pairs_.size());
      for (std::size_t l = 0; l < ds.subjects[i].curves.size(); ++l) {
        pairs_.emplace_back(i, l);
        row_offset_.push_back(rows_);
        rows_ += ds.subjects[i].curves[l].size();
      }
    }
    subject_offset_.push_back(pairs_.size());
  }
  std::size_t size() const { return pairs_.size(); }
  std::pair<std::size_t, std::size_t> operator[](std::size_t c) const { return pairs_[c]; }
  std::size_t flat(std::size_t i, std::size_t l) const { return subject_offset_[i] + l; }
  /// First stacked measurement row of curve c.
  std::size_t row(std::size_t c) const { return row_offset_[c]; }
  std::size_t rows() const { return rows_; }

private:
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::vector<std::size_t> subject_offset_;
  std::vector<std::size_t> row_offset_;
  std::size_t rows_ = 0;
};

/// Free parameters (beta, theta, a, alpha).
struct ParameterState {
  Eigen::VectorXd beta;
  Eigen::VectorXd theta;
  std::vector<std::vector<double>> a;
  double alpha = 0.0;

  double mean_a() const {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto &row : a)
      for (double v : row) {
        sum += v;
        ++count;
      }
    return count ? sum / count : 0.0;
  }
};

struct PenaltySettings {
  double lambda1 = 0.04;
  double lambda2 = 0.01;
  double lambda3_0 = 1.0;
  bool adaptive = false;
  bool a_known = false;
};

/// Throws InvalidInput unless the dataset satisfies the structural invariants.
inline void validate(const Dataset &ds) {
  if (ds.subjects.empty())
    throw InvalidInput("no measurements");
  for (const auto &s : ds.subjects) {
    if (s.curves.empty())
      throw InvalidInput("subject '" + s.id + "' has no curves");
    for (const auto &c : s.curves) {
      if (c.times.empty())
        throw InvalidInput("curve '" + s.id + "/" + c.id + "' has no measurements");
      if (c.times.size() != c.values.size())
        throw InvalidInput("curve '" + s.id + "/" + c.id + "' has mismatched times and values");
      for (std::size_t j = 0; j < c.times.size(); ++j) {
        if (!std::isfinite(c.times[j]) || !std::isfinite(c.values[j]))
          throw InvalidInput("curve '" + s.id + "/" + c.id + "' has non-finite entries");
        if (c.times[j] < 0.0 || c.times[j] > 1.0)
          throw InvalidInput("curve '" + s.id + "/" + c.id + "' has times outside [0, 1]");
        if (j > 0 && !(c.times[j] > c.times[j - 1]))
          throw InvalidInput("curve '" + s.id + "/" + c.id + "' has non-increasing times");
      }
    }
  }
}

/// True iff every m_il > 2 and m.. - N. - n - M > 0. Reasons for a false
/// answer are appended to `diagnostics`.
inline bool validate_for_variance(const Dataset &ds, int M, std::vector<std::string> *diagnostics = nullptr) {
  bool ok = true;
  auto note = [&](const std::string &msg) {
    ok = false;
    if (diagnostics)
      diagnostics->push_back(msg);
  };
  for (const auto &s : ds.subjects)
    for (const auto &c : s.curves)
      if (c.size() <= 2)
        note("curve '" + s.id + "/" + c.id + "' has " + std::to_string(c.size()) +
             " measurements (need more than 2)");
  const long dof = static_cast<long>(ds.n_measurements()) - static_cast<long>(ds.n_curves()) -
                   static_cast<long>(ds.n_subjects()) - M;
  if (dof <= 0)
    note("residual degrees of freedom m.. - N. - n - M = " + std::to_string(dof) + " is not positive");
  return ok;
}

namespace detail {

inline double parse_number(std::string_view text, std::size_t line, const char *field) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t'))
    text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t'))
    text.remove_suffix(1);
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v))
    throw InvalidInput("line " + std::to_string(line) + ": non-numeric " + field + " '" +
                       std::string(text) + "'");
  return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t k = 0; k <= line.size(); ++k)
    if (k == line.size() || line[k] == ',') {
      out.push_back(line.substr(start, k - start));
      start = k + 1;
    }
  return out;
}

/// Shortest decimal text that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Maps raw times onto [0, 1] when any of them leaves [0, 1].
inline void normalize_times(Dataset &ds) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto &s : ds.subjects)
    for (const auto &c : s.curves)
      for (double t : c.times) {
        lo = std::min(lo, t);
        hi = std::max(hi, t);
      }
  if (lo >= 0.0 && hi <= 1.0)
    return;
  if (!(hi > lo))
    throw InvalidInput("cannot rescale times: all measurement times are equal");
  ds.time_map = TimeMap{lo, hi - lo, true};
  for (auto &s : ds.subjects)
    for (auto &c : s.curves)
      for (double &t : c.times)
        t = std::clamp((t - lo) / (hi - lo), 0.0, 1.0);
}

} // namespace detail

/// Parses the long-format CSV `subject_id,curve_id,time,value`.
///
/// Subjects and curves keep their order of first appearance; measurements
/// within a curve are stably sorted by time. Duplicate (subject, curve,
/// time) triples are rejected.
inline Dataset parse_csv(std::istream &in) {
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  Dataset ds;
  std::map<std::string, std::size_t> subject_pos;
  std::vector<std::map<std::string, std::size_t>> curve_pos;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0)
      line.erase(0, 3);
    if (line.empty())
      continue;
    const auto fields = detail::split_csv(line);
    if (!header_seen) {
      if (fields.size() != 4 || fields[0] != "subject_id" || fields[1] != "curve_id" ||
          fields[2] != "time" || fields[3] != "value")
        throw InvalidInput("missing CSV header 'subject_id,curve_id,time,value'");
      header_seen = true;
      continue;
    }
    if (fields.size() != 4)
      throw InvalidInput("line " + std::to_string(lineno) + ": expected 4 fields");
    const std::string sid(fields[0]), cid(fields[1]);
    if (sid.empty() || cid.empty())
      throw InvalidInput("line " + std::to_string(lineno) + ": empty subject or curve id");
    const double t = detail::parse_number(fields[2], lineno, "time");
    const double y = detail::parse_number(fields[3], lineno, "value");
    auto [sit, s_new] = subject_pos.try_emplace(sid, ds.subjects.size());
    if (s_new) {
      ds.subjects.push_back(Subject{sid, {}});
      curve_pos.emplace_back();
    }
    auto &subject = ds.subjects[sit->second];
    auto [cit, c_new] = curve_pos[sit->second].try_emplace(cid, subject.curves.size());
    if (c_new)
      subject.curves.push_back(Curve{cid, {}, {}});
    auto &curve = subject.curves[cit->second];
    curve.times.push_back(t);
    curve.values.push_back(y);
  }
  if (ds.subjects.empty())
    throw InvalidInput("no measurements");
  for (auto &s : ds.subjects)
    for (auto &c : s.curves) {
      std::vector<std::size_t> order(c.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t p, std::size_t q) { return c.times[p] < c.times[q]; });
      Curve sorted{c.id, {}, {}};
      for (std::size_t k : order) {
        if (!sorted.times.empty() && sorted.times.back() == c.times[k])
          throw InvalidInput("duplicate measurement time for curve '" + s.id + "/" + c.id + "'");
        sorted.times.push_back(c.times[k]);
        sorted.values.push_back(c.values[k]);
      }
      c = std::move(sorted);
    }
  detail::normalize_times(ds);
  validate(ds);
  return ds;
}

/// Parses the nested JSON mirror {"subjects":[{"id","curves":[{"id","times","values"}]}]}.
/// Times must already be strictly increasing within each curve.
inline Dataset parse_json(std::istream &in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw InvalidInput(std::string("dataset json: ") + e.what());
  }
  Dataset ds;
  try {
    for (const auto &js : j.at("subjects")) {
      Subject s{js.at("id").get<std::string>(), {}};
      for (const auto &jc : js.at("curves"))
        s.curves.push_back(Curve{jc.at("id").get<std::string>(), jc.at("times").get<std::vector<double>>(),
                                 jc.at("values").get<std::vector<double>>()});
      ds.subjects.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception &e) {
    throw InvalidInput(std::string("dataset json: ") + e.what());
  }
  for (const auto &s : ds.subjects)
    for (const auto &c : s.curves)
      for (std::size_t k = 1; k < c.times.size(); ++k)
        if (!(c.times[k] > c.times[k - 1]))
          throw InvalidInput("curve '" + s.id + "/" + c.id + "' has non-increasing times");
  detail::normalize_times(ds);
  validate(ds);
  return ds;
}

/// Loads a dataset; `.json` files use the nested mirror, anything else CSV.
inline Dataset load_dataset(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw InvalidInput("cannot open data file '" + path.string() + "'");
  if (path.extension() == ".json")
    return parse_json(in);
  return parse_csv(in);
}

inline void write_csv(std::ostream &out, const Dataset &ds) {
  out << "subject_id,curve_id,time,value\n";
  for (const auto &s : ds.subjects)
    for (const auto &c : s.curves)
      for (std::size_t j = 0; j < c.size(); ++j)
        out << s.id << ',' << c.id << ',' << detail::format_double(c.times[j]) << ','
            << detail::format_double(c.values[j]) << '\n';
}

inline void save_dataset(const std::filesystem::path &path, const Dataset &ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw InvalidInput("cannot write '" + path.string() + "'");
  if (path.extension() == ".json") {
    nlohmann::json j;
    j["subjects"] = nlohmann::json::array();
    for (const auto &s : ds.subjects) {
      nlohmann::json js{{"id", s.id}, {"curves", nlohmann::json::array()}};
      for (const auto &c : s.curves)
        js["curves"].push_back({{"id", c.id}, {"times", c.times}, {"values", c.values}});
      j["subjects"].push_back(std::move(js));
    }
    out << j.dump(1) << '\n';
    return;
  }
  write_csv(out, ds);
}

/// Default initial state: a_il = Y_il1, theta = 0, beta = 1_M.
inline ParameterState initial_state(const Dataset &ds, int M) {
  ParameterState st;
  st.beta = Eigen::VectorXd::Ones(M);
  st.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ds.n_subjects()));
  for (const auto &s : ds.subjects) {
    std::vector<double> row;
    for (const auto &c : s.curves)
      row.push_back(c.values.front());
    st.a.push_back(std::move(row));
  }
  st.alpha = st.mean_a();
  return st;
}

/// Throws unless the state's dimensions match the dataset.
inline void check_state(const Dataset &ds, const ParameterState &st, int M) {
  if (st.beta.size() != M)
    throw InvalidInput("state: beta has wrong length");
  if (st.theta.size() != static_cast<Eigen::Index>(ds.n_subjects()) || st.a.size() != ds.n_subjects())
    throw InvalidInput("state: subject count mismatch");
  for (std::size_t i = 0; i < ds.n_subjects(); ++i)
    if (st.a[i].size() != ds.subjects[i].curves.size())
      throw InvalidInput("state: curve count mismatch for subject " + std::to_string(i));
}

} // namespace semidyn

#endif // SEMIDYN_DATA_HPP
