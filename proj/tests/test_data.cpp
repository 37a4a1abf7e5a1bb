#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "semidyn/data.hpp"
#include "semidyn/objective.hpp"
#include "test_util.hpp"

using namespace semidyn;

namespace {

Dataset csv(const std::string &text) {
  std::istringstream in(text);
  return parse_csv(in);
}

} // namespace

TEST(Csv, GroupsByFirstAppearanceAndSortsTimes) {
  const Dataset ds = csv("subject_id,curve_id,time,value\n"
                         "B,2,0.5,1.5\n"
                         "A,1,0.1,0.1\n"
                         "B,2,0.2,1.2\n"
                         "B,1,0.3,1.3\n"
                         "A,1,0.0,0.0\n");
  ASSERT_EQ(ds.n_subjects(), 2u);
  EXPECT_EQ(ds.subjects[0].id, "B");
  EXPECT_EQ(ds.subjects[0].curves[0].id, "2");
  EXPECT_EQ(ds.subjects[0].curves[1].id, "1");
  EXPECT_EQ(ds.subjects[0].curves[0].times, (std::vector<double>{0.2, 0.5}));
  EXPECT_EQ(ds.subjects[0].curves[0].values, (std::vector<double>{1.2, 1.5}));
  EXPECT_EQ(ds.subjects[1].curves[0].times, (std::vector<double>{0.0, 0.1}));
  EXPECT_EQ(ds.n_curves(), 3u);
  EXPECT_EQ(ds.n_measurements(), 5u);
  EXPECT_FALSE(ds.time_map.applied);
}

TEST(Csv, ToleratesCrlfBomAndBlankLines) {
  const Dataset ds = csv("\xEF\xBB\xBFsubject_id,curve_id,time,value\r\n\r\nS,C, 0.5 ,2\r\n");
  EXPECT_EQ(ds.subjects[0].curves[0].values[0], 2.0);
}

TEST(Csv, RejectsMalformedInput) {
  EXPECT_THROW(csv(""), InvalidInput);
  EXPECT_THROW(csv("subject,curve,time,value\nS,C,0,1\n"), InvalidInput);
  EXPECT_THROW(csv("subject_id,curve_id,time,value\n"), InvalidInput);
  EXPECT_THROW(csv("subject_id,curve_id,time,value\nS,C,0\n"), InvalidInput);
  EXPECT_THROW(csv("subject_id,curve_id,time,value\nS,C,abc,1\n"), InvalidInput);
  EXPECT_THROW(csv("subject_id,curve_id,time,value\nS,C,0.1,nan\n"), InvalidInput);
  EXPECT_THROW(csv("subject_id,curve_id,time,value\nS,C,0.1,1\nS,C,0.1,2\n"), InvalidInput);
  EXPECT_THROW(csv("subject_id,curve_id,time,value\n,C,0.1,1\n"), InvalidInput);
}

TEST(Csv, RescalesTimesOutsideUnitInterval) {
  const Dataset ds = csv("subject_id,curve_id,time,value\nS,C,10,1\nS,C,20,2\nS,D,15,3\n");
  EXPECT_TRUE(ds.time_map.applied);
  EXPECT_EQ(ds.time_map.offset, 10.0);
  EXPECT_EQ(ds.time_map.scale, 10.0);
  EXPECT_EQ(ds.subjects[0].curves[0].times, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(ds.subjects[0].curves[1].times[0], 0.5);
  EXPECT_EQ(ds.time_map.to_raw(0.5), 15.0);
  EXPECT_THROW(csv("subject_id,curve_id,time,value\nS,C,3,1\nS,D,3,2\n"), InvalidInput);
}

TEST(Json, ParsesNestedMirrorAndRejectsUnsorted) {
  std::istringstream ok(R"({"subjects":[{"id":"S","curves":[{"id":"C","times":[0,0.5],"values":[1,2]}]}]})");
  const Dataset ds = parse_json(ok);
  EXPECT_EQ(ds.subjects[0].curves[0].values[1], 2.0);
  std::istringstream bad(R"({"subjects":[{"id":"S","curves":[{"id":"C","times":[0.5,0],"values":[1,2]}]}]})");
  EXPECT_THROW(parse_json(bad), InvalidInput);
  std::istringstream mismatch(R"({"subjects":[{"id":"S","curves":[{"id":"C","times":[0,1],"values":[1]}]}]})");
  EXPECT_THROW(parse_json(mismatch), InvalidInput);
  std::istringstream garbage("{not json");
  EXPECT_THROW(parse_json(garbage), InvalidInput);
}

TEST(Dataset, CsvAndJsonRoundTripExactly) {
  const Dataset ds = testutil::small_dataset(3, 2, 5, testutil::true_g(), 0.01, 4);
  const auto dir = std::filesystem::temp_directory_path() / "semidyn_data_rt";
  std::filesystem::create_directories(dir);
  for (const char *name : {"d.csv", "d.json"}) {
    save_dataset(dir / name, ds);
    EXPECT_EQ(load_dataset(dir / name), ds) << name;
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, VarianceEligibility) {
  std::vector<std::string> why;
  const Dataset ok = testutil::small_dataset(3, 2, 5, testutil::true_g(), 0.01, 4);
  EXPECT_TRUE(validate_for_variance(ok, 4, &why));
  const Dataset thin = testutil::small_dataset(3, 2, 2, testutil::true_g(), 0.01, 4);
  EXPECT_FALSE(validate_for_variance(thin, 4, &why));
  EXPECT_FALSE(why.empty());
  // 3*2*3 - 6 - 3 - M = 9 - M
  const Dataset tight = testutil::small_dataset(3, 2, 3, testutil::true_g(), 0.01, 4);
  EXPECT_TRUE(validate_for_variance(tight, 8));
  EXPECT_FALSE(validate_for_variance(tight, 9));
}

TEST(Dataset, InitialStateUsesFirstObservation) {
  const Dataset ds = csv("subject_id,curve_id,time,value\nS,C,0.2,0.4\nS,C,0.1,0.3\nT,C,0,0.6\n");
  const ParameterState st = initial_state(ds, 3);
  EXPECT_EQ(st.a[0][0], 0.3);
  EXPECT_EQ(st.a[1][0], 0.6);
  EXPECT_DOUBLE_EQ(st.alpha, 0.45);
  EXPECT_EQ(st.beta, Eigen::VectorXd::Ones(3));
  EXPECT_EQ(st.theta, Eigen::VectorXd::Zero(2));
  ParameterState wrong = st;
  wrong.a[1].push_back(0.0);
  EXPECT_THROW(check_state(ds, wrong, 3), InvalidInput);
  EXPECT_THROW(check_state(ds, st, 4), InvalidInput);
}

// Independent recomputation: each curve solved separately, penalties summed by hand.
TEST(Objective, LossMatchesDirectSum) {
  const GradientFunction g = testutil::true_g();
  ParameterState truth;
  const Dataset ds = testutil::small_dataset(3, 3, 4, g, 0.02, 9, &truth);
  ParameterState st = truth;
  st.alpha = 0.27;
  const PenaltySettings pen{0.3, 0.7, 1.0, false, false};
  const PenaltyMatrix B = build_flatness_penalty(g.basis, 0.2, 1.5);
  const LossBreakdown lb = loss(ds, st, g, pen, B);

  double sse = 0.0, pa = 0.0, pt = 0.0;
  for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
    pt += st.theta[i] * st.theta[i];
    for (std::size_t l = 0; l < ds.subjects[i].curves.size(); ++l) {
      const Curve &c = ds.subjects[i].curves[l];
      const auto x = eval_at_times(solve_trajectory(g, st.a[i][l], st.theta[i]), g, st.theta[i], c.times);
      for (std::size_t j = 0; j < c.size(); ++j)
        sse += (c.values[j] - x[j]) * (c.values[j] - x[j]);
      pa += (st.a[i][l] - 0.27) * (st.a[i][l] - 0.27);
    }
  }
  double pb = 0.0;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      pb += st.beta[r] * B.B(r, c) * st.beta[c];
  EXPECT_NEAR(lb.sse, sse, 1e-12 * (1 + sse));
  EXPECT_NEAR(lb.pen_a, 0.3 * pa, 1e-12);
  EXPECT_NEAR(lb.pen_theta, 0.7 * pt, 1e-12);
  EXPECT_NEAR(lb.pen_beta, pb, 1e-12);
  EXPECT_NEAR(lb.total, sse + 0.3 * pa + 0.7 * pt + pb, 1e-12);

  PenaltySettings known = pen;
  known.a_known = true;
  EXPECT_EQ(loss(ds, st, g, known, B).pen_a, 0.0);
}

TEST(Objective, ResidualsAreRagged) {
  const GradientFunction g = testutil::true_g();
  ParameterState truth;
  const Dataset ds = testutil::small_dataset(2, 3, 5, g, 0.0, 2, &truth);
  const auto r = residuals(ds, truth, g);
  ASSERT_EQ(r.size(), 2u);
  ASSERT_EQ(r[1].size(), 3u);
  ASSERT_EQ(r[1][2].size(), 5u);
  for (const auto &s : r)
    for (const auto &c : s)
      for (double v : c)
        EXPECT_EQ(v, 0.0);
}

TEST(Objective, EvaluationIsIndependentOfThreadCount) {
  const GradientFunction g = testutil::true_g();
  ParameterState truth;
  const Dataset ds = testutil::small_dataset(4, 3, 6, g, 0.01, 3, &truth);
  SolverSettings one, many;
  many.threads = 4;
  const auto e1 = evaluate_model(ds, truth, g, one, true);
  const auto e4 = evaluate_model(ds, truth, g, many, true);
  EXPECT_EQ(e1.residuals, e4.residuals);
  for (std::size_t c = 0; c < e1.samples.size(); ++c)
    EXPECT_EQ(e1.samples[c].d_beta, e4.samples[c].d_beta);
}

TEST(Variances, HandComputedMoments) {
  Dataset ds;
  for (int i = 0; i < 2; ++i) {
    Subject s{"S" + std::to_string(i), {}};
    for (int l = 0; l < 2; ++l)
      s.curves.push_back(Curve{"C" + std::to_string(l), {0.1, 0.2, 0.3, 0.4, 0.5}, {0, 0, 0, 0, 0}});
    ds.subjects.push_back(s);
  }
  ParameterState st;
  st.beta = Eigen::VectorXd::Ones(2);
  st.theta = (Eigen::VectorXd(2) << 0.1, -0.3).finished();
  st.a = {{0.1, 0.3}, {0.2, 0.6}};
  Eigen::VectorXd resid = Eigen::VectorXd::Constant(20, 0.1);
  // dof = 20 - 4 - 2 - 2 = 12; mean a = 0.3
  const VarianceEstimates v = update_variances(ds, st, resid, 2);
  EXPECT_NEAR(v.sigma_eps2, 0.2 / 12, 1e-15);
  EXPECT_NEAR(v.sigma_a2, (0.04 + 0.0 + 0.01 + 0.09) / 3, 1e-15);
  EXPECT_NEAR(v.sigma_theta2, 0.10, 1e-15);
  EXPECT_NEAR(v.lambda1, v.sigma_eps2 / v.sigma_a2, 1e-15);
  EXPECT_NEAR(v.lambda2, v.sigma_eps2 / 0.10, 1e-15);
  EXPECT_EQ(update_variances(ds, st, resid, 2, true).lambda1, 0.0);

  ParameterState flat = st;
  flat.theta.setZero();
  EXPECT_THROW(update_variances(ds, flat, resid, 2), ModelError);
  EXPECT_THROW(update_variances(ds, st, resid, 14), ModelError);
}
