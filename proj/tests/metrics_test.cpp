// tests/metrics_test.cpp

// Copyright 2026 The CML Annotation Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <random>

#include "cml/metrics.hpp"
#include "oracles.hpp"

namespace cml {
namespace {

template <typename F>
ErrorCode CodeOf(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kValidationError;
}

std::vector<int> Expand(const std::vector<std::pair<std::pair<int, int>, int>>& joint, bool first) {
  std::vector<int> out;
  for (const auto& [pair, count] : joint)
    for (int i = 0; i < count; ++i) out.push_back(first ? pair.first : pair.second);
  return out;
}

TEST(Recall, TwoByTwoExample) {
  // [[9,1],[2,3]]
  const auto truth = Expand({{{1, 1}, 9}, {{1, 2}, 1}, {{2, 1}, 2}, {{2, 2}, 3}}, true);
  const auto pred = Expand({{{1, 1}, 9}, {{1, 2}, 1}, {{2, 1}, 2}, {{2, 2}, 3}}, false);
  const auto s = SummarizeConfusion(Confusion(truth, pred));
  EXPECT_EQ(s.confusion.counts, (std::vector<std::vector<long long>>{{9, 1}, {2, 3}}));
  EXPECT_DOUBLE_EQ(*s.recall[0], 0.9);
  EXPECT_DOUBLE_EQ(*s.recall[1], 0.6);
  EXPECT_DOUBLE_EQ(s.unweighted_average, 0.75);
}

TEST(Recall, PerfectAndAbsentClass) {
  FrameLabels t, p;
  t.class_ids = {1, 1, 2, 2, 3};
  p.class_ids = t.class_ids;
  EXPECT_DOUBLE_EQ(ConfusionAndRecall(t, p).unweighted_average, 1.0);
  // Class 4 appears only in the prediction: its row is empty and it leaves the UA denominator.
  p.class_ids = {1, 4, 2, 2, 3};
  const auto s = ConfusionAndRecall(t, p);
  ASSERT_EQ(s.confusion.class_ids, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_FALSE(s.recall[3].has_value());
  EXPECT_DOUBLE_EQ(s.unweighted_average, (0.5 + 1.0 + 1.0) / 3);
}

TEST(Recall, LengthMismatch) {
  FrameLabels t, p;
  t.class_ids = {1, 2};
  p.class_ids = {1};
  EXPECT_EQ(CodeOf([&] { ConfusionAndRecall(t, p); }), ErrorCode::kLengthMismatch);
  p.class_ids = {1, 2};
  p.frame_step_s = 0.01;
  EXPECT_EQ(CodeOf([&] { ConfusionAndRecall(t, p); }), ErrorCode::kLengthMismatch);
}

TEST(Auc, Examples) {
  EXPECT_DOUBLE_EQ(*BinaryAuc({0.9, 0.8, 0.2, 0.1}, {true, true, false, false}), 1.0);
  EXPECT_DOUBLE_EQ(*BinaryAuc({0.5, 0.5, 0.5}, {true, false, true}), 0.5);
  EXPECT_DOUBLE_EQ(*BinaryAuc({0.9, 0.4, 0.6, 0.1}, {true, true, false, false}), 0.75);
  EXPECT_DOUBLE_EQ(oracle::PairAuc({0.9, 0.4, 0.6, 0.1}, {true, true, false, false}), 0.75);
  EXPECT_FALSE(BinaryAuc({0.1, 0.2}, {true, true}).has_value());
}

TEST(Auc, AgreesWithPairCountingOnRandomSets) {
  std::mt19937_64 rng(77);
  for (int set = 0; set < 100; ++set) {
    const int n = 2 + static_cast<int>(rng() % 200);
    const int levels = set % 3 == 0 ? 5 : 1000;  // some sets with many ties
    std::vector<double> score(n);
    std::vector<bool> pos(n);
    for (int i = 0; i < n; ++i) {
      score[i] = static_cast<double>(rng() % levels) / levels;
      pos[i] = rng() % 3 == 0;
    }
    pos[0] = true;
    pos[1] = false;
    EXPECT_NEAR(*BinaryAuc(score, pos), oracle::PairAuc(score, pos), 1e-12) << "set " << set;
  }
}

TEST(Auc, OneVsRestAveragesClassesInTruth) {
  const std::vector<int> truth = {1, 1, 2, 2, 3};
  RowMatrix scores(5, 3);
  scores << 0.8, 0.1, 0.1, 0.6, 0.3, 0.1, 0.2, 0.7, 0.1, 0.5, 0.4, 0.1, 0.1, 0.1, 0.8;
  const auto s = RocAucOvr(truth, scores, {1, 2, 3});
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> col;
    std::vector<bool> pos;
    for (int i = 0; i < 5; ++i) {
      col.push_back(scores(i, static_cast<Eigen::Index>(k)));
      pos.push_back(truth[i] == s.class_ids[k]);
    }
    EXPECT_DOUBLE_EQ(*s.auc[k], oracle::PairAuc(col, pos));
  }
  EXPECT_DOUBLE_EQ(s.unweighted_average, (*s.auc[0] + *s.auc[1] + *s.auc[2]) / 3);
  EXPECT_EQ(CodeOf([&] { RocAucOvr(std::vector<int>{2, 2}, RowMatrix::Zero(2, 3), {1, 2, 3}); }),
            ErrorCode::kSingleClass);
  EXPECT_EQ(CodeOf([&] { RocAucOvr(truth, RowMatrix::Zero(4, 3), {1, 2, 3}); }), ErrorCode::kLengthMismatch);
}

TEST(Kappa, Examples) {
  const std::vector<int> a = {1, 2, 2, 3, 1, 1};
  EXPECT_DOUBLE_EQ(CohensKappa(a, a), 1.0);
  const std::vector<int> x = Expand({{{1, 1}, 20}, {{1, 2}, 5}, {{2, 1}, 10}, {{2, 2}, 15}}, true);
  const std::vector<int> y = Expand({{{1, 1}, 20}, {{1, 2}, 5}, {{2, 1}, 10}, {{2, 2}, 15}}, false);
  EXPECT_NEAR(CohensKappa(x, y), oracle::Kappa(x, y), 1e-12);
  EXPECT_NEAR(CohensKappa(x, y), 0.4, 1e-12);
  EXPECT_LE(CohensKappa(a, std::vector<int>(6, 1)), 0.0);
  EXPECT_DOUBLE_EQ(CohensKappa(std::vector<int>(4, 2), std::vector<int>(4, 2)), 1.0);
  EXPECT_EQ(CodeOf([&] { CohensKappa(a, std::vector<int>{1}); }), ErrorCode::kLengthMismatch);
}

TEST(Kappa, AgreesWithTabulationOnRandomRaters) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 10 + static_cast<int>(rng() % 300);
    std::vector<int> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng() % 4);
      b[i] = rng() % 2 ? a[i] : static_cast<int>(rng() % 4);
    }
    EXPECT_NEAR(CohensKappa(a, b), oracle::Kappa(a, b), 1e-12);
  }
}

double AlphaByTabulation(const std::vector<std::vector<double>>& r) {
  const std::size_t k = r.size(), n = r[0].size();
  auto var = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= v.size();
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / (v.size() - 1);
  };
  double sum_var = 0;
  std::vector<double> totals(n, 0.0);
  for (const auto& row : r) {
    sum_var += var(row);
    for (std::size_t i = 0; i < n; ++i) totals[i] += row[i];
  }
  return static_cast<double>(k) / (k - 1) * (1 - sum_var / var(totals));
}

TEST(Alpha, Examples) {
  RowMatrix same(3, 4);
  same << 1, 2, 3, 5, 1, 2, 3, 5, 1, 2, 3, 5;
  EXPECT_NEAR(CronbachsAlpha(same), 1.0, 1e-12);
  RowMatrix two(2, 3);
  two << 1, 2, 3, 2, 3, 4;
  // var 1 each, totals {3,5,7} var 4: alpha = 2 * (1 - 2/4) = 1.
  EXPECT_NEAR(CronbachsAlpha(two), AlphaByTabulation({{1, 2, 3}, {2, 3, 4}}), 1e-12);
  EXPECT_NEAR(CronbachsAlpha(two), 1.0, 1e-12);
  RowMatrix flat(2, 3);
  flat << 1, 1, 1, 2, 2, 2;
  EXPECT_EQ(CodeOf([&] { CronbachsAlpha(flat); }), ErrorCode::kZeroVariance);
  EXPECT_EQ(CodeOf([&] { CronbachsAlpha(RowMatrix::Ones(1, 3)); }), ErrorCode::kInvalidRange);
}

TEST(Alpha, IndependentRatersNearZero) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    RowMatrix r(4, 5000);
    std::vector<std::vector<double>> rows(4, std::vector<double>(5000));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5000; ++j) rows[i][j] = r(i, j) = g(rng);
    EXPECT_NEAR(CronbachsAlpha(r), 0.0, 0.1);
    EXPECT_NEAR(CronbachsAlpha(r), AlphaByTabulation(rows), 1e-9);
  }
}

}  // namespace
}  // namespace cml
