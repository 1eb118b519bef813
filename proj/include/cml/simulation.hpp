// cml/simulation.hpp

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

#include <atomic>
#include <cstdio>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cml/engine.hpp"

namespace cml {

// Incremental-annotation experiment: n sessions are labelled (L), the rest
// (U) are predicted by c, retrained on blindly (c'), or retrained after the
// frames below confidence t received their true label (c'').
struct SimulationConfig {
  std::vector<int> labeled_counts;  // values of n
  std::vector<double> thresholds;   // values of t
  LearnerConfig learner;
  int jobs = 1;
};

struct ClassifierScore {
  double ua = 0.0;
  std::vector<int> class_ids;
  std::vector<std::optional<double>> recall;
  std::vector<std::optional<double>> auc;
  std::optional<double> uaauc;
};

struct CorrectedScore {
  double threshold = 0.0;
  ClassifierScore score;
  std::optional<double> inspection_rate;  // absent when U is empty
  std::optional<double> correction_rate;
};

struct SimulationCell {
  int labeled_count = 0;
  ClassifierScore c;
  ClassifierScore c_prime;
  std::vector<CorrectedScore> c_doubleprime;  // one per threshold
};

struct SimulationReport {
  std::vector<int> class_ids;
  std::vector<double> thresholds;
  std::vector<SimulationCell> cells;
  std::uint64_t seed = 0;
};

// Models behind one cell, for callers that need to inspect them.
struct SimulationModels {
  LinearModel c;
  LinearModel c_prime;
  std::vector<LinearModel> c_doubleprime;
};

// Train and test frames laid out once; train rows are concatenated in
// session order, so L is always a prefix.
struct PreparedCorpus {
  RowMatrix train_rows;
  std::vector<int> train_truth;
  std::vector<Eigen::Index> session_offsets;  // size |train| + 1
  RowMatrix test_rows;
  std::vector<int> test_truth;
  std::vector<int> class_order;
};

inline PreparedCorpus PrepareCorpus(const std::vector<SessionBundle>& train, const std::vector<SessionBundle>& test) {
  PreparedCorpus out;
  auto gather = [&](const std::vector<SessionBundle>& bundles, RowMatrix& rows, std::vector<int>& truth,
                    std::vector<Eigen::Index>* offsets) {
    Eigen::Index total = 0, dim = -1;
    for (const auto& b : bundles) {
      if (!b.annotation) throw Error(ErrorCode::kUnfinishedAnnotation, "session " + b.session_id + " has no ground truth");
      const FeatureStream& s = detail::RequireStream(b);
      if (dim >= 0 && s.dim() != dim) throw Error(ErrorCode::kDimensionMismatch, "sessions differ in feature dim");
      dim = s.dim();
      total += s.rows();
    }
    rows.resize(total, std::max<Eigen::Index>(dim, 0));
    Eigen::Index r = 0;
    if (offsets) offsets->push_back(0);
    for (const auto& b : bundles) {
      const FeatureStream& s = *b.stream;
      rows.middleRows(r, s.rows()) = s.frames;
      const FrameLabels t = SegmentsToFrameCount(*b.annotation, s.frame_step_s, static_cast<std::size_t>(s.rows()),
                                                 s.start_time_s);
      truth.insert(truth.end(), t.class_ids.begin(), t.class_ids.end());
      r += s.rows();
      if (offsets) offsets->push_back(r);
      for (int id : b.annotation->scheme.AllIds())
        if (std::find(out.class_order.begin(), out.class_order.end(), id) == out.class_order.end())
          out.class_order.push_back(id);
    }
  };
  gather(train, out.train_rows, out.train_truth, &out.session_offsets);
  gather(test, out.test_rows, out.test_truth, nullptr);
  if (out.train_rows.cols() != out.test_rows.cols() && out.test_rows.rows() > 0)
    throw Error(ErrorCode::kDimensionMismatch, "train and test feature dims differ");
  return out;
}

inline ClassifierScore ScoreOnTest(const LinearModel& model, const PreparedCorpus& corpus) {
  const RowMatrix p = PredictProba(model, corpus.test_rows);
  std::vector<int> pred;
  pred.reserve(static_cast<std::size_t>(p.rows()));
  for (auto i : ArgmaxRows(p)) pred.push_back(model.class_ids[i]);
  std::vector<int> order;
  for (int id : corpus.class_order)
    if (std::find(corpus.test_truth.begin(), corpus.test_truth.end(), id) != corpus.test_truth.end() ||
        std::find(pred.begin(), pred.end(), id) != pred.end())
      order.push_back(id);
  const RecallSummary r = SummarizeConfusion(Confusion(corpus.test_truth, pred, order));
  ClassifierScore s;
  s.ua = r.unweighted_average;
  s.class_ids = r.confusion.class_ids;
  s.recall = r.recall;
  try {
    const AucSummary a = RocAucOvr(corpus.test_truth, p, model.class_ids);
    s.uaauc = a.unweighted_average;
    s.auc.assign(s.class_ids.size(), std::nullopt);
    for (std::size_t i = 0; i < a.class_ids.size(); ++i) {
      const auto it = std::find(s.class_ids.begin(), s.class_ids.end(), a.class_ids[i]);
      if (it != s.class_ids.end()) s.auc[it - s.class_ids.begin()] = a.auc[i];
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kSingleClass) throw;
  }
  return s;
}

// Ids of `labels` in corpus order.
inline std::vector<int> PresentIn(const std::vector<int>& order, const std::vector<int>& labels) {
  std::vector<char> seen(order.size(), 0);
  for (int l : labels) {
    const auto it = std::find(order.begin(), order.end(), l);
    if (it != order.end()) seen[it - order.begin()] = 1;
  }
  std::vector<int> out;
  for (std::size_t i = 0; i < order.size(); ++i)
    if (seen[i]) out.push_back(order[i]);
  return out;
}

inline SimulationCell SimulateCell(const PreparedCorpus& corpus, int n, const std::vector<double>& thresholds,
                                   const LearnerConfig& learner, SimulationModels* models = nullptr) {
  const int sessions = static_cast<int>(corpus.session_offsets.size()) - 1;
  if (n < 1 || n > sessions)
    throw Error(ErrorCode::kInvalidRange, "n=" + std::to_string(n) + " outside [1," + std::to_string(sessions) + "]");
  for (double t : thresholds)
    if (!(t >= 0.0 && t <= 1.0)) throw Error(ErrorCode::kInvalidRange, "threshold outside [0,1]");

  const Eigen::Index l_rows = corpus.session_offsets[n];
  const Eigen::Index all_rows = corpus.train_rows.rows();
  const std::vector<int> l_truth(corpus.train_truth.begin(), corpus.train_truth.begin() + l_rows);

  SimulationCell cell;
  cell.labeled_count = n;
  const LinearModel c = TrainLinearRows(corpus.train_rows.topRows(l_rows), l_truth,
                                        PresentIn(corpus.class_order, l_truth), learner);
  cell.c = ScoreOnTest(c, corpus);

  if (l_rows == all_rows) {
    cell.c_prime = cell.c;
    for (double t : thresholds) cell.c_doubleprime.push_back({t, cell.c, std::nullopt, std::nullopt});
    if (models) {
      models->c = c;
      models->c_prime = c;
      models->c_doubleprime.assign(thresholds.size(), c);
    }
    return cell;
  }

  const RowMatrix p = PredictProba(c, corpus.train_rows.bottomRows(all_rows - l_rows));
  const auto argmax = ArgmaxRows(p);
  const std::size_t u_count = argmax.size();
  std::vector<int> labels = l_truth;
  labels.resize(static_cast<std::size_t>(all_rows));
  for (std::size_t i = 0; i < u_count; ++i) labels[l_rows + i] = c.class_ids[argmax[i]];
  const LinearModel c_prime = TrainLinearRows(corpus.train_rows, labels, PresentIn(corpus.class_order, labels), learner);
  cell.c_prime = ScoreOnTest(c_prime, corpus);
  if (models) {
    models->c = c;
    models->c_prime = c_prime;
  }

  for (double t : thresholds) {
    std::vector<int> corrected = labels;
    std::size_t inspected = 0, changed = 0;
    for (std::size_t i = 0; i < u_count; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      if (p(row, static_cast<Eigen::Index>(argmax[i])) < t) {
        ++inspected;
        const int truth = corpus.train_truth[l_rows + i];
        if (truth != corrected[l_rows + i]) {
          ++changed;
          corrected[l_rows + i] = truth;
        }
      }
    }
    CorrectedScore cs;
    cs.threshold = t;
    cs.inspection_rate = static_cast<double>(inspected) / static_cast<double>(u_count);
    cs.correction_rate = static_cast<double>(changed) / static_cast<double>(u_count);
    if (inspected == 0) {
      cs.score = cell.c_prime;
      if (models) models->c_doubleprime.push_back(c_prime);
    } else {
      const LinearModel c2 =
          TrainLinearRows(corpus.train_rows, corrected, PresentIn(corpus.class_order, corrected), learner);
      cs.score = ScoreOnTest(c2, corpus);
      if (models) models->c_doubleprime.push_back(c2);
    }
    cell.c_doubleprime.push_back(std::move(cs));
  }
  return cell;
}

using SimulationProgress = std::function<void(int done, int total)>;

inline SimulationReport RunSimulation(const std::vector<SessionBundle>& train, const std::vector<SessionBundle>& test,
                                      const SimulationConfig& config, const SimulationProgress& progress = {}) {
  const int sessions = static_cast<int>(train.size());
  for (int n : config.labeled_counts)
    if (n < 1 || n > sessions)
      throw Error(ErrorCode::kInvalidRange, "n=" + std::to_string(n) + " outside [1," + std::to_string(sessions) + "]");
  for (double t : config.thresholds)
    if (!(t >= 0.0 && t <= 1.0)) throw Error(ErrorCode::kInvalidRange, "threshold outside [0,1]");
  const PreparedCorpus corpus = PrepareCorpus(train, test);

  SimulationReport report;
  report.class_ids = corpus.class_order;
  report.thresholds = config.thresholds;
  report.seed = config.learner.seed;
  report.cells.resize(config.labeled_counts.size());

  std::atomic<std::size_t> next{0};
  std::atomic<int> done{0};
  std::mutex progress_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < report.cells.size(); i = next++) {
      try {
        report.cells[i] = SimulateCell(corpus, config.labeled_counts[i], config.thresholds, config.learner);
      } catch (...) {
        std::lock_guard lock(progress_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
      const int d = ++done;
      if (progress) {
        std::lock_guard lock(progress_mutex);
        progress(d, static_cast<int>(report.cells.size()));
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(config.jobs, static_cast<int>(report.cells.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return report;
}

// --- report serialisation ---------------------------------------------------

inline nlohmann::json ToJson(const ClassifierScore& s) {
  auto opt_array = [](const std::vector<std::optional<double>>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : v) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
    return a;
  };
  return {{"ua", s.ua},
          {"class_ids", s.class_ids},
          {"recall", opt_array(s.recall)},
          {"auc", opt_array(s.auc)},
          {"uaauc", s.uaauc ? nlohmann::json(*s.uaauc) : nlohmann::json(nullptr)}};
}

inline nlohmann::json ToJson(const SimulationReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : r.cells) {
    nlohmann::json corrected = nlohmann::json::array();
    for (const auto& cs : cell.c_doubleprime)
      corrected.push_back({{"t", cs.threshold},
                           {"score", ToJson(cs.score)},
                           {"ir", cs.inspection_rate ? nlohmann::json(*cs.inspection_rate) : nlohmann::json(nullptr)},
                           {"cr", cs.correction_rate ? nlohmann::json(*cs.correction_rate) : nlohmann::json(nullptr)}});
    cells.push_back({{"n", cell.labeled_count},
                     {"c", ToJson(cell.c)},
                     {"c_prime", ToJson(cell.c_prime)},
                     {"c_doubleprime", corrected}});
  }
  return {{"class_ids", r.class_ids}, {"thresholds", r.thresholds}, {"seed", r.seed}, {"cells", cells}};
}

// Aligned text table: n, UA(c), UA(c'), then UA(c''), IR, CR per threshold.
inline std::string FormatReportTable(const SimulationReport& r) {
  std::ostringstream os;
  char buf[64];
  os << "  n   UA(c)  UA(c')";
  for (double t : r.thresholds) {
    std::snprintf(buf, sizeof buf, "  UA(c'')@%.2f  IR@%.2f  CR@%.2f", t, t, t);
    os << buf;
  }
  os << '\n';
  for (const auto& cell : r.cells) {
    std::snprintf(buf, sizeof buf, "%3d  %6.1f  %6.1f", cell.labeled_count, 100 * cell.c.ua, 100 * cell.c_prime.ua);
    os << buf;
    for (const auto& cs : cell.c_doubleprime) {
      std::snprintf(buf, sizeof buf, "  %12.1f", 100 * cs.score.ua);
      os << buf;
      for (const auto& rate : {cs.inspection_rate, cs.correction_rate}) {
        if (rate)
          std::snprintf(buf, sizeof buf, "  %6.1f%%", 100 * *rate);
        else
          std::snprintf(buf, sizeof buf, "  %7s", "-");
        os << buf;
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cml
