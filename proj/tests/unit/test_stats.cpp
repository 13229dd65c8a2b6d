#include <cmath>
#include <filesystem>
#include <fstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "nhgcat/errors.hpp"
#include "nhgcat/interpret.hpp"
#include "nhgcat/stats.hpp"

using namespace nhgcat;

namespace {

double boost_t_p(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

double boost_chi_p(double x, double df) {
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(df), x));
}

// Chi-square statistic from explicit expected counts.
double brute_chi2(const std::vector<double>& table, std::size_t rows, std::size_t cols) {
  std::vector<double> r(rows, 0.0), c(cols, 0.0);
  double n = 0.0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      r[i] += table[i * cols + j];
      c[j] += table[i * cols + j];
      n += table[i * cols + j];
    }
  double stat = 0.0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double e = r[i] * c[j] / n;
      if (e > 0.0) stat += (table[i * cols + j] - e) * (table[i * cols + j] - e) / e;
    }
  return stat;
}

SubjectTrace trace_with(const std::string& id, const Matrix& attention) {
  SubjectTrace t;
  t.id = id;
  t.attention = attention;
  return t;
}

Matrix uniform_attention() {
  Matrix a = Matrix::Constant(5, 5, 0.15);
  a.diagonal().setConstant(0.4);
  return a;
}

}  // namespace

TEST(SpecialFunctions, IncompleteBetaMatchesOracle) {
  for (double a : {0.5, 1.0, 2.5, 7.0, 30.0})
    for (double b : {0.5, 1.0, 3.0, 12.0})
      for (double x : {0.0, 1e-4, 0.1, 0.37, 0.5, 0.8, 0.999, 1.0})
        EXPECT_NEAR(incomplete_beta(a, b, x), boost::math::ibeta(a, b, x), 1e-9) << a << " " << b << " " << x;
}

TEST(SpecialFunctions, IncompleteGammaMatchesOracle) {
  for (double a : {0.5, 1.0, 2.0, 4.5, 20.0, 100.0})
    for (double x : {0.0, 0.01, 0.5, 1.0, 3.0, 10.0, 50.0, 150.0}) {
      EXPECT_NEAR(gamma_p(a, x), boost::math::gamma_p(a, x), 1e-9) << a << " " << x;
      EXPECT_NEAR(gamma_q(a, x), boost::math::gamma_q(a, x), 1e-9) << a << " " << x;
    }
}

TEST(SpecialFunctions, PValuesMatchOracle) {
  for (double df : {1.0, 2.0, 4.0, 9.0, 40.0})
    for (double t : {0.0, 0.3, 1.0, 2.0, 3.464, 8.0, -2.5})
      EXPECT_NEAR(student_t_two_sided(t, df), boost_t_p(t, df), 1e-6) << t << " " << df;
  for (double df : {1.0, 2.0, 3.0, 6.0, 20.0})
    for (double x : {0.0, 0.5, 2.0, 7.5, 20.0, 60.0})
      EXPECT_NEAR(chi_square_sf(x, df), boost_chi_p(x, df), 1e-6) << x << " " << df;
}

TEST(PairedT, WorkedExample) {
  // Differences [1, 2, 3]: mean 2, sd 1, t = 2 sqrt(3).
  TTest r = paired_t_test(std::vector<double>{2, 4, 6}, std::vector<double>{1, 2, 3});
  EXPECT_DOUBLE_EQ(r.mean_difference, 2.0);
  EXPECT_DOUBLE_EQ(r.sd_difference, 1.0);
  EXPECT_NEAR(r.t, 2.0 * std::sqrt(3.0), 1e-12);
  EXPECT_EQ(r.df, 2.0);
  EXPECT_NEAR(r.p, boost_t_p(2.0 * std::sqrt(3.0), 2.0), 1e-10);
  EXPECT_NEAR(r.p, 0.0742, 1e-4);
  EXPECT_FALSE(r.degenerate);
}

TEST(PairedT, SignFlipAndIdenticalSamples) {
  const std::vector<double> a{0.7, 0.75, 0.8, 0.72, 0.69}, b{0.6, 0.66, 0.71, 0.7, 0.61};
  TTest ab = paired_t_test(a, b), ba = paired_t_test(b, a);
  EXPECT_DOUBLE_EQ(ab.t, -ba.t);
  EXPECT_DOUBLE_EQ(ab.p, ba.p);
  TTest same = paired_t_test(a, a);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p, 1.0);
  EXPECT_TRUE(same.degenerate);
}

TEST(PairedT, ConstantDifferenceIsCapped) {
  const std::vector<double> a{0.8, 0.8, 0.8, 0.8, 0.8}, b{0.7, 0.7, 0.7, 0.7, 0.7};
  TTest r = paired_t_test(a, b);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.t, kDegenerateT);
  EXPECT_EQ(r.p, 0.0);
  EXPECT_EQ(paired_t_test(b, a).t, -kDegenerateT);
  EXPECT_THROW(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), UsageError);
  EXPECT_THROW(paired_t_test(a, std::vector<double>{1.0, 2.0}), UsageError);
}

TEST(ChiSquare, WorkedExample) {
  ChiSquare r = chi_square_independence(std::vector<double>{10, 0, 0, 0, 10, 0}, 2, 3);
  EXPECT_NEAR(r.statistic, 20.0, 1e-12);
  // The empty third column has zero expected count and is skipped; df stays (r-1)(c-1).
  EXPECT_EQ(r.df, 2.0);
  EXPECT_NEAR(r.p, std::exp(-10.0), 1e-15);
  EXPECT_NEAR(r.p, 4.5e-5, 1e-6);
}

TEST(ChiSquare, IdenticalRowsGiveZero) {
  ChiSquare r = chi_square_independence(std::vector<double>{3, 5, 2, 3, 5, 2}, 2, 3);
  EXPECT_NEAR(r.statistic, 0.0, 1e-15);
  EXPECT_NEAR(r.p, 1.0, 1e-12);
}

TEST(ChiSquare, MatchesBruteForceOnRandomTables) {
  RngStream rng(8, "tables");
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> t(6);
    const double scale = trial % 2 ? 160.0 : 12.0;
    for (auto& v : t) v = std::floor(rng.uniform() * scale);
    if (t[0] + t[1] + t[2] == 0.0 || t[3] + t[4] + t[5] == 0.0) continue;
    ChiSquare r = chi_square_independence(t, 2, 3);
    EXPECT_NEAR(r.statistic, brute_chi2(t, 2, 3), 1e-9 * std::max(1.0, r.statistic));
    EXPECT_NEAR(r.p, boost_chi_p(r.statistic, 2.0), 1e-6);
  }
}

TEST(Hierarchy, IdenticalGroupsGiveNoDifference) {
  auto s = nhgcat::testing::small_cohort(51);
  const CircuitAtlas& atlas = s.cohort.atlas;
  std::vector<SubjectTrace> traces;
  std::vector<int> labels;
  for (int k = 0; k < 4; ++k) {
    SubjectTrace t;
    t.id = "s" + std::to_string(k);
    for (Circuit c : kCircuits) {
      const auto m = static_cast<Eigen::Index>(atlas.members(c).size());
      Matrix masks(m, 3);
      for (Eigen::Index i = 0; i < m; ++i) masks.row(i) << (i % 3 == 0 ? 0.6 : 0.1), (i % 3 == 1 ? 0.7 : 0.2), 0.2;
      t.masks[static_cast<std::size_t>(c)] = masks;
    }
    traces.push_back(t);
    labels.push_back(k % 2);
  }
  auto stats = hierarchy_stats(traces, labels, atlas);
  EXPECT_EQ(stats.size(), atlas.regions() * 3);
  for (const auto& r : stats) {
    EXPECT_EQ(r.diff_norm, 0.0);
    EXPECT_NEAR(r.chi2, 0.0, 1e-15);
    EXPECT_NEAR(r.p, 1.0, 1e-12);
  }
}

TEST(Hierarchy, ArgmaxCountsAndNormalization) {
  auto s = nhgcat::testing::small_cohort(52);
  const CircuitAtlas& atlas = s.cohort.atlas;
  std::vector<SubjectTrace> traces;
  std::vector<int> labels;
  // MDD subjects put every region on level 1, HC subjects on level 2, except
  // one HC subject with an exact tie between levels 1 and 3.
  for (int k = 0; k < 6; ++k) {
    SubjectTrace t;
    t.id = "s" + std::to_string(k);
    const int label = k < 3 ? 1 : 0;
    for (Circuit c : kCircuits) {
      const auto m = static_cast<Eigen::Index>(atlas.members(c).size());
      Matrix masks(m, 3);
      for (Eigen::Index i = 0; i < m; ++i) {
        if (label == 1) masks.row(i) << 0.8, 0.1, 0.1;
        else if (k == 5) masks.row(i) << 0.4, 0.2, 0.4;
        else masks.row(i) << 0.1, 0.8, 0.1;
      }
      t.masks[static_cast<std::size_t>(c)] = masks;
    }
    traces.push_back(t);
    labels.push_back(label);
  }
  auto stats = hierarchy_stats(traces, labels, atlas);
  double max_abs = 0.0;
  for (const auto& r : stats) {
    max_abs = std::max(max_abs, std::fabs(r.diff_norm));
    // Per-level assignment counts: level 1 gets 3 MDD and 1 HC, level 2 gets 2 HC.
    EXPECT_EQ(r.count_mdd, r.level == 1 ? 3u : 0u);
    EXPECT_EQ(r.count_hc, r.level == 1 ? 1u : (r.level == 2 ? 2u : 0u));
    EXPECT_EQ(r.circuit, atlas.circuit_of(r.region));
    if (r.level == 1) {
      EXPECT_DOUBLE_EQ(r.p_mdd, 1.0);
      EXPECT_DOUBLE_EQ(r.p_hc, 1.0 / 3.0);  // the tie goes to the lower level
    } else if (r.level == 2) {
      EXPECT_DOUBLE_EQ(r.p_hc, 2.0 / 3.0);
    } else {
      EXPECT_EQ(r.p_hc, 0.0);
    }
    // Table [[3,0,0],[1,2,0]]: oracle via explicit expected counts.
    EXPECT_NEAR(r.chi2, brute_chi2({3, 0, 0, 1, 2, 0}, 2, 3), 1e-12);
  }
  EXPECT_DOUBLE_EQ(max_abs, 1.0);
  EXPECT_THROW(hierarchy_stats(traces, std::vector<int>(6, 1), atlas), DataError);
}

TEST(AttentionReport, UniformAttentionKeepsTwoLowestTargets) {
  std::vector<SubjectTrace> traces{trace_with("a", uniform_attention()), trace_with("b", uniform_attention())};
  const std::vector<int> labels{0, 1};
  AttentionReport r = attention_report(traces, labels);
  EXPECT_EQ(r.mean_hc, uniform_attention());
  ASSERT_EQ(r.edges.size(), 20u);
  for (std::size_t i = 0; i < r.edges.size(); ++i) {
    const auto& e = r.edges[i];
    EXPECT_EQ(e.group, i < 10 ? 0 : 1);
    EXPECT_NE(e.source, e.target);
    const auto src = static_cast<int>(e.source);
    // Lowest two targets other than the source itself.
    const int first = src == 0 ? 1 : 0;
    const int second = src <= 1 ? 2 : 1;
    EXPECT_EQ(static_cast<int>(e.target), i % 2 == 0 ? first : second);
    EXPECT_DOUBLE_EQ(e.norm, 1.0);
  }
}

TEST(AttentionReport, GroupMeansAndGlobalNormalization) {
  RngStream rng(6, "attn");
  std::vector<SubjectTrace> traces;
  std::vector<int> labels;
  for (int k = 0; k < 8; ++k) {
    Matrix a(5, 5);
    for (Eigen::Index i = 0; i < 5; ++i) {
      for (Eigen::Index j = 0; j < 5; ++j) a(i, j) = rng.uniform();
      a.row(i) /= a.row(i).sum();
    }
    traces.push_back(trace_with("s" + std::to_string(k), a));
    labels.push_back(k % 2);
  }
  AttentionReport r = attention_report(traces, labels);
  Matrix mean_mdd = Matrix::Zero(5, 5);
  for (int k = 1; k < 8; k += 2) mean_mdd += traces[static_cast<std::size_t>(k)].attention / 4.0;
  EXPECT_TRUE(r.mean_mdd.isApprox(mean_mdd, 1e-14));
  EXPECT_LE(r.edges.size(), 20u);
  double max_norm = 0.0;
  for (const auto& e : r.edges) {
    EXPECT_NE(e.source, e.target);
    EXPECT_GE(e.norm, 0.0);
    EXPECT_LE(e.norm, 1.0);
    max_norm = std::max(max_norm, e.norm);
    const Matrix& m = e.group == 1 ? r.mean_mdd : r.mean_hc;
    EXPECT_EQ(e.raw, m(static_cast<Eigen::Index>(e.source), static_cast<Eigen::Index>(e.target)));
    // No pruned entry of this row beats a retained one.
    for (Eigen::Index j = 0; j < 5; ++j) {
      if (j == static_cast<Eigen::Index>(e.source)) continue;
      int larger = 0;
      for (Eigen::Index k = 0; k < 5; ++k)
        if (k != static_cast<Eigen::Index>(e.source) && m(static_cast<Eigen::Index>(e.source), k) > e.raw) ++larger;
      EXPECT_LT(larger, 2);
    }
  }
  EXPECT_EQ(max_norm, 1.0);
  EXPECT_THROW(attention_report(traces, std::vector<int>(8, 0)), DataError);
}

TEST(Reports, FilesAreWritten) {
  const auto dir = std::filesystem::temp_directory_path() / "nhgcat_test_reports";
  std::filesystem::create_directories(dir);
  std::vector<SubjectTrace> traces{trace_with("a", uniform_attention()), trace_with("b", uniform_attention())};
  AttentionReport r = attention_report(traces, std::vector<int>{0, 1});
  write_attention_edges(dir / "attention_edges.csv", r);
  write_chord(dir / "chord.json", r);
  std::ifstream edges(dir / "attention_edges.csv");
  std::string header;
  std::getline(edges, header);
  EXPECT_EQ(header, "group,source,target,raw_weight,norm_weight");
  std::ifstream chord(dir / "chord.json");
  auto j = nlohmann::json::parse(chord);
  EXPECT_EQ(j["nodes"].size(), 5u);

  FrequencyAblation f;
  f.splits = {"fold0", "fold1"};
  f.auc_low = {0.8, 0.9};
  f.auc_high = {0.6, 0.65};
  f.test = paired_t_test(f.auc_low, f.auc_high);
  f.tested = true;
  write_frequency_ablation(dir / "freq_ablation.json", f);
  std::ifstream freq(dir / "freq_ablation.json");
  auto fj = nlohmann::json::parse(freq);
  EXPECT_TRUE(fj.contains("auc_low") || fj.dump().find("0.9") != std::string::npos);
}
