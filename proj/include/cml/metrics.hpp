// cml/metrics.hpp

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

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "cml/annotation.hpp"
#include "cml/error.hpp"

namespace cml {

// Rows are ground truth, columns predictions, both indexed by class_ids.
struct ConfusionMatrix {
  std::vector<int> class_ids;
  std::vector<std::vector<long long>> counts;

  int IndexOf(int id) const {
    const auto it = std::find(class_ids.begin(), class_ids.end(), id);
    return it == class_ids.end() ? -1 : static_cast<int>(it - class_ids.begin());
  }
  long long RowSum(std::size_t r) const { return std::accumulate(counts[r].begin(), counts[r].end(), 0LL); }
  long long Total() const {
    long long t = 0;
    for (std::size_t r = 0; r < counts.size(); ++r) t += RowSum(r);
    return t;
  }
};

struct RecallSummary {
  ConfusionMatrix confusion;
  std::vector<std::optional<double>> recall;  // per class; empty when the truth row is empty
  double unweighted_average = 0.0;
};

inline RecallSummary SummarizeConfusion(ConfusionMatrix confusion) {
  RecallSummary out;
  out.recall.resize(confusion.class_ids.size());
  double sum = 0.0;
  int defined = 0;
  for (std::size_t k = 0; k < confusion.class_ids.size(); ++k) {
    const long long row = confusion.RowSum(k);
    if (row == 0) continue;
    out.recall[k] = static_cast<double>(confusion.counts[k][k]) / row;
    sum += *out.recall[k];
    ++defined;
  }
  out.unweighted_average = defined > 0 ? sum / defined : 0.0;
  out.confusion = std::move(confusion);
  return out;
}

// Builds the frame-level confusion matrix. Unless given, the class order is
// the sorted union of ids seen in either sequence.
inline ConfusionMatrix Confusion(const std::vector<int>& truth, const std::vector<int>& pred,
                                 std::vector<int> class_order = {}) {
  if (truth.size() != pred.size())
    throw Error(ErrorCode::kLengthMismatch, "truth has " + std::to_string(truth.size()) + " frames, prediction " +
                                                std::to_string(pred.size()));
  for (const auto* seq : {&truth, &pred})
    for (int id : *seq)
      if (std::find(class_order.begin(), class_order.end(), id) == class_order.end()) class_order.push_back(id);
  ConfusionMatrix cm;
  cm.class_ids = std::move(class_order);
  cm.counts.assign(cm.class_ids.size(), std::vector<long long>(cm.class_ids.size(), 0));
  std::map<int, int> index;
  for (std::size_t i = 0; i < cm.class_ids.size(); ++i) index[cm.class_ids[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < truth.size(); ++i) ++cm.counts[index[truth[i]]][index[pred[i]]];
  return cm;
}

inline void RequireSameGrid(const FrameLabels& a, const FrameLabels& b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::kLengthMismatch, std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " frames");
  if (std::abs(a.frame_step_s - b.frame_step_s) > 1e-12 || std::abs(a.start_time_s - b.start_time_s) > 1e-9)
    throw Error(ErrorCode::kLengthMismatch, "frame grids differ");
}

inline RecallSummary ConfusionAndRecall(const FrameLabels& truth, const FrameLabels& pred,
                                        std::vector<int> class_order = {}) {
  RequireSameGrid(truth, pred);
  if (class_order.empty()) {
    class_order = truth.class_ids;
    class_order.insert(class_order.end(), pred.class_ids.begin(), pred.class_ids.end());
    std::sort(class_order.begin(), class_order.end());
    class_order.erase(std::unique(class_order.begin(), class_order.end()), class_order.end());
  }
  return SummarizeConfusion(Confusion(truth.class_ids, pred.class_ids, std::move(class_order)));
}

// Rank-statistic AUC; tied scores contribute one half. Returns nullopt when
// either the positive or the negative set is empty.
inline std::optional<double> BinaryAuc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw Error(ErrorCode::kLengthMismatch, "scores and labels differ");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1) / 2.0) / (np * static_cast<double>(n_neg));
}

struct AucSummary {
  std::vector<int> class_ids;
  std::vector<std::optional<double>> auc;  // nullopt where undefined
  double unweighted_average = 0.0;
};

// One-vs-rest AUC per class present in truth. Column j of scores belongs to
// score_class_ids[j]; a class without a column scores zero everywhere.
inline AucSummary RocAucOvr(const std::vector<int>& truth, const RowMatrix& scores,
                            const std::vector<int>& score_class_ids) {
  if (static_cast<Eigen::Index>(truth.size()) != scores.rows())
    throw Error(ErrorCode::kLengthMismatch, "score rows do not align with truth");
  AucSummary out;
  for (int id : truth)
    if (std::find(out.class_ids.begin(), out.class_ids.end(), id) == out.class_ids.end()) out.class_ids.push_back(id);
  std::sort(out.class_ids.begin(), out.class_ids.end());
  double sum = 0.0;
  int defined = 0;
  std::vector<double> col(truth.size());
  std::vector<bool> positive(truth.size());
  for (int id : out.class_ids) {
    const auto it = std::find(score_class_ids.begin(), score_class_ids.end(), id);
    for (std::size_t i = 0; i < truth.size(); ++i) {
      col[i] = it == score_class_ids.end() ? 0.0 : scores(static_cast<Eigen::Index>(i), it - score_class_ids.begin());
      positive[i] = truth[i] == id;
    }
    out.auc.push_back(BinaryAuc(col, positive));
    if (out.auc.back()) {
      sum += *out.auc.back();
      ++defined;
    }
  }
  if (defined == 0) throw Error(ErrorCode::kSingleClass, "AUC undefined: truth contains a single class");
  out.unweighted_average = sum / defined;
  return out;
}

inline AucSummary RocAucOvr(const FrameLabels& truth, const RowMatrix& scores,
                            const std::vector<int>& score_class_ids) {
  return RocAucOvr(truth.class_ids, scores, score_class_ids);
}

inline double CohensKappa(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kLengthMismatch, "rater sequences differ in length");
  if (a.empty()) throw Error(ErrorCode::kLengthMismatch, "empty rater sequences");
  std::map<int, double> ma, mb;
  double agree = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma[a[i]] += 1.0;
    mb[b[i]] += 1.0;
    if (a[i] == b[i]) agree += 1.0;
  }
  const double n = static_cast<double>(a.size());
  const double po = agree / n;
  double pe = 0.0;
  for (const auto& [id, count] : ma) {
    const auto it = mb.find(id);
    if (it != mb.end()) pe += (count / n) * (it->second / n);
  }
  if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

inline double CohensKappa(const FrameLabels& a, const FrameLabels& b) {
  RequireSameGrid(a, b);
  return CohensKappa(a.class_ids, b.class_ids);
}

// ratings: raters x items. Sample variances use the N-1 denominator.
inline double CronbachsAlpha(const RowMatrix& ratings) {
  const Eigen::Index k = ratings.rows(), n = ratings.cols();
  if (k < 2 || n < 2) throw Error(ErrorCode::kInvalidRange, "need at least two raters and two items");
  auto variance = [n](const Eigen::VectorXd& v) {
    const double mean = v.mean();
    return (v.array() - mean).square().sum() / static_cast<double>(n - 1);
  };
  double rater_var = 0.0;
  for (Eigen::Index r = 0; r < k; ++r) rater_var += variance(ratings.row(r).transpose());
  const double total_var = variance(ratings.colwise().sum().transpose());
  if (total_var == 0.0) throw Error(ErrorCode::kZeroVariance, "total score variance is zero");
  return static_cast<double>(k) / (k - 1) * (1.0 - rater_var / total_var);
}

inline nlohmann::json ToJson(const RecallSummary& s) {
  nlohmann::json recall = nlohmann::json::array();
  for (const auto& r : s.recall) recall.push_back(r ? nlohmann::json(*r) : nlohmann::json(nullptr));
  return {{"class_ids", s.confusion.class_ids},
          {"counts", s.confusion.counts},
          {"recall", recall},
          {"ua", s.unweighted_average}};
}

inline nlohmann::json ToJson(const AucSummary& s) {
  nlohmann::json auc = nlohmann::json::array();
  for (const auto& a : s.auc) auc.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"class_ids", s.class_ids}, {"auc", auc}, {"uaauc", s.unweighted_average}};
}

}  // namespace cml
