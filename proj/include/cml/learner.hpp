// cml/learner.hpp

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
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "cml/dataset.hpp"
#include "cml/error.hpp"

namespace cml {

inline constexpr std::uint64_t kDefaultSeed = 20170101;

// Uniform integer in [0, bound) from a 64-bit engine by rejection, so the
// sequence does not depend on the standard library's distributions.
inline std::uint64_t UniformBelow(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % bound;
}

// With enabled == false every row is kept.
inline LabeledFrameSet BalanceRows(const Eigen::Ref<const RowMatrix>& rows, const std::vector<int>& labels,
                                   const std::vector<int>& class_ids, std::uint64_t seed, bool enabled = true) {
  std::vector<std::vector<Eigen::Index>> members(class_ids.size());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const auto it = std::find(class_ids.begin(), class_ids.end(), labels[i]);
    if (it == class_ids.end())
      throw Error(ErrorCode::kValidationError, "label " + std::to_string(labels[i]) + " missing from class_ids");
    members[it - class_ids.begin()].push_back(i);
  }
  std::size_t target = std::numeric_limits<std::size_t>::max();
  for (const auto& m : members)
    if (!m.empty()) target = std::min(target, m.size());
  if (target == std::numeric_limits<std::size_t>::max()) target = 0;

  std::mt19937_64 rng(seed);
  std::vector<char> keep(static_cast<std::size_t>(rows.rows()), 0);
  for (auto& m : members) {
    if (!enabled || m.size() == target) {
      for (auto i : m) keep[i] = 1;
      continue;
    }
    // Partial Fisher-Yates: the first `target` slots form the sample.
    for (std::size_t j = 0; j < target; ++j) {
      const std::size_t pick = j + UniformBelow(rng, m.size() - j);
      std::swap(m[j], m[pick]);
      keep[m[j]] = 1;
    }
  }

  LabeledFrameSet out;
  out.rows.resize(static_cast<Eigen::Index>(std::count(keep.begin(), keep.end(), 1)), rows.cols());
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    if (!keep[i]) continue;
    out.rows.row(r++) = rows.row(i);
    out.labels.push_back(labels[i]);
  }
  for (std::size_t c = 0; c < class_ids.size(); ++c)
    if (!members[c].empty()) out.class_ids.push_back(class_ids[c]);
  return out;
}

// Keeps min-class-count rows of every class, chosen uniformly at random with
// the given seed. Retained rows keep their relative order.
inline LabeledFrameSet BalanceUndersample(const LabeledFrameSet& data, std::uint64_t seed) {
  data.Validate();
  return BalanceRows(data.rows, data.labels, data.class_ids, seed);
}

struct ScalerParams {
  Eigen::VectorXd min;
  Eigen::VectorXd max;
};

inline ScalerParams FitScaler(const RowMatrix& rows) {
  if (rows.rows() == 0) throw Error(ErrorCode::kValidationError, "cannot fit a scaler on zero rows");
  return {rows.colwise().minCoeff().transpose(), rows.colwise().maxCoeff().transpose()};
}

// x' = 2 (x - min) / (max - min) - 1; constant dimensions map to 0. Values
// outside the training range extrapolate.
inline RowMatrix ApplyScaler(const ScalerParams& params, const RowMatrix& rows) {
  if (rows.cols() != params.min.size())
    throw Error(ErrorCode::kDimensionMismatch, "scaler fitted on dim " + std::to_string(params.min.size()) +
                                                   ", got " + std::to_string(rows.cols()));
  const Eigen::Index d = rows.cols();
  Eigen::RowVectorXd mul(d), add(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double range = params.max[j] - params.min[j];
    if (range > 0) {
      mul[j] = 2.0 / range;
      add[j] = -params.min[j] * mul[j] - 1.0;
    } else {
      mul[j] = 0.0;
      add[j] = 0.0;
    }
  }
  RowMatrix out = rows;
  out.array().rowwise() *= mul.array();
  out.rowwise() += add;
  return out;
}

// --- objective --------------------------------------------------------------

namespace detail {

// log(1 + exp(-m)) without overflow.
inline double LogisticLoss(double m) { return m >= 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m)); }
inline double Sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

struct LossAndGradient {
  double loss = 0.0;
  Eigen::VectorXd gradient;
};

// F(w) = 0.5 |w|^2 + C sum_i log(1 + exp(-y_i w.x_i)) with y_i = +-1.
inline LossAndGradient LossGradient(const Eigen::VectorXd& w, const RowMatrix& x, const Eigen::VectorXd& y,
                                    double c) {
  if (x.cols() != w.size() || x.rows() != y.size())
    throw Error(ErrorCode::kDimensionMismatch, "loss inputs disagree in shape");
  const Eigen::VectorXd z = x * w;
  Eigen::VectorXd r(z.size());
  double data_loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double m = y[i] * z[i];
    data_loss += detail::LogisticLoss(m);
    r[i] = c * (detail::Sigmoid(m) - 1.0) * y[i];
  }
  LossAndGradient out;
  out.loss = 0.5 * w.squaredNorm() + c * data_loss;
  out.gradient = w + x.transpose() * r;
  return out;
}

// --- minimiser --------------------------------------------------------------

struct MinimizerOptions {
  double tolerance = 1e-4;  // stop once |g| <= tolerance * |g0|
  int max_iterations = 1000;
  int history = 10;
  double armijo = 1e-4;
  int max_backtracks = 40;
};

struct MinimizerResult {
  Eigen::VectorXd x;
  std::vector<double> objective_history;  // objective at every accepted iterate
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Evaluates several independent problems at once. Row j of `points` is the
// trial point for problem problems[j]; the callee fills losses[j] and row j
// of gradients.
using BatchObjective = std::function<void(const std::vector<int>& problems, const RowMatrix& points,
                                          std::vector<double>& losses, RowMatrix& gradients)>;

// L-BFGS with Armijo backtracking, run independently for each of
// `problem_count` problems. Each problem keeps its own history, step and
// line search; the lockstep only lets their evaluations share one call.
inline std::vector<MinimizerResult> MinimizeLbfgsBatch(int problem_count, const RowMatrix& start,
                                                       const BatchObjective& objective,
                                                       const MinimizerOptions& opt = {}) {
  struct State {
    Eigen::VectorXd x, g, d, trial_x;
    double f = 0.0, g0_norm = 0.0, step = 1.0, slope = 0.0;
    std::deque<Eigen::VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;
    int backtracks = 0;
    bool initialised = false;
    bool done = false;
    MinimizerResult result;
  };
  const Eigen::Index p = start.cols();
  std::vector<State> states(problem_count);
  for (int k = 0; k < problem_count; ++k) {
    states[k].x = start.row(k).transpose();
    states[k].trial_x = states[k].x;
  }

  auto direction = [&](State& st) {
    Eigen::VectorXd q = st.g;
    const std::size_t m = st.s_hist.size();
    std::vector<double> alpha(m);
    for (std::size_t i = m; i-- > 0;) {
      alpha[i] = st.rho_hist[i] * st.s_hist[i].dot(q);
      q -= alpha[i] * st.y_hist[i];
    }
    if (m > 0) q *= st.s_hist.back().dot(st.y_hist.back()) / st.y_hist.back().squaredNorm();
    for (std::size_t i = 0; i < m; ++i) {
      const double beta = st.rho_hist[i] * st.y_hist[i].dot(q);
      q += (alpha[i] - beta) * st.s_hist[i];
    }
    st.d = -q;
    st.slope = st.g.dot(st.d);
    if (!(st.slope < 0)) {  // lost descent; restart from steepest descent
      st.s_hist.clear();
      st.y_hist.clear();
      st.rho_hist.clear();
      st.d = -st.g;
      st.slope = -st.g.squaredNorm();
    }
    st.step = m == 0 ? 1.0 / std::max(1.0, st.g.norm()) : 1.0;
    st.backtracks = 0;
    st.trial_x = st.x + st.step * st.d;
  };

  auto finish = [&](State& st, bool converged) {
    st.done = true;
    st.result.x = st.x;
    st.result.gradient_norm = st.g.norm();
    st.result.converged = converged;
  };

  std::vector<int> active;
  std::vector<double> losses;
  RowMatrix points, grads;
  while (true) {
    active.clear();
    for (int k = 0; k < problem_count; ++k)
      if (!states[k].done) active.push_back(k);
    if (active.empty()) break;
    points.resize(static_cast<Eigen::Index>(active.size()), p);
    for (std::size_t j = 0; j < active.size(); ++j) points.row(j) = states[active[j]].trial_x.transpose();
    losses.assign(active.size(), 0.0);
    grads.resize(points.rows(), p);
    objective(active, points, losses, grads);

    for (std::size_t j = 0; j < active.size(); ++j) {
      State& st = states[active[j]];
      const double f_new = losses[j];
      if (!st.initialised) {
        st.initialised = true;
        st.f = f_new;
        st.g = grads.row(j).transpose();
        st.g0_norm = st.g.norm();
        st.result.objective_history.push_back(st.f);
        if (st.g0_norm == 0.0 || !std::isfinite(st.f)) {
          finish(st, std::isfinite(st.f));
          continue;
        }
        direction(st);
        continue;
      }
      if (std::isfinite(f_new) && f_new <= st.f + opt.armijo * st.step * st.slope && f_new < st.f) {
        Eigen::VectorXd g_new = grads.row(j).transpose();
        Eigen::VectorXd s = st.trial_x - st.x;
        Eigen::VectorXd y = g_new - st.g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
          st.s_hist.push_back(std::move(s));
          st.y_hist.push_back(std::move(y));
          st.rho_hist.push_back(1.0 / sy);
          if (static_cast<int>(st.s_hist.size()) > opt.history) {
            st.s_hist.pop_front();
            st.y_hist.pop_front();
            st.rho_hist.pop_front();
          }
        }
        st.x = st.trial_x;
        st.f = f_new;
        st.g = std::move(g_new);
        ++st.result.iterations;
        st.result.objective_history.push_back(st.f);
        if (st.g.norm() <= opt.tolerance * st.g0_norm) {
          finish(st, true);
        } else if (st.result.iterations >= opt.max_iterations) {
          finish(st, false);
        } else {
          direction(st);
        }
      } else if (++st.backtracks > opt.max_backtracks) {
        finish(st, false);  // no further decrease representable
      } else {
        st.step *= 0.5;
        st.trial_x = st.x + st.step * st.d;
      }
    }
  }
  std::vector<MinimizerResult> out;
  out.reserve(states.size());
  for (auto& st : states) out.push_back(std::move(st.result));
  return out;
}

inline MinimizerResult MinimizeLbfgs(const std::function<LossAndGradient(const Eigen::VectorXd&)>& f,
                                     const Eigen::VectorXd& start, const MinimizerOptions& opt = {}) {
  RowMatrix s0 = start.transpose();
  BatchObjective batch = [&](const std::vector<int>&, const RowMatrix& points, std::vector<double>& losses,
                             RowMatrix& grads) {
    const auto r = f(points.row(0).transpose());
    losses[0] = r.loss;
    grads.row(0) = r.gradient.transpose();
  };
  return MinimizeLbfgsBatch(1, s0, batch, opt).front();
}

// --- model ------------------------------------------------------------------

struct LearnerConfig {
  double regularization_c = 1.0;
  double bias_value = 0.1;
  std::uint64_t seed = kDefaultSeed;
  double tolerance = 1e-4;
  int max_iterations = 1000;
  bool balance = true;
};

struct LinearModel {
  RowMatrix weights;  // num_classes x (dim + 1); last column multiplies bias_value
  double bias_value = 0.1;
  ScalerParams scaler;
  std::vector<int> class_ids;
  double regularization_c = 1.0;

  Eigen::Index dim() const { return weights.cols() - 1; }
  Eigen::Index num_classes() const { return weights.rows(); }
};

struct TrainingReport {
  std::vector<MinimizerResult> per_class;
  Eigen::Index balanced_rows = 0;
};

namespace detail {

inline void RequireFinite(const RowMatrix& m, const char* what) {
  if (!m.allFinite()) throw Error(ErrorCode::kNonFinite, std::string(what) + " contains non-finite values");
}

inline RowMatrix WithBias(const RowMatrix& scaled, double bias_value) {
  RowMatrix out(scaled.rows(), scaled.cols() + 1);
  out.leftCols(scaled.cols()) = scaled;
  out.col(scaled.cols()).setConstant(bias_value);
  return out;
}

// One-vs-rest objectives over a shared design matrix: problem c has targets
// y.col(c) in {-1,+1}. Evaluates all requested problems with one product.
class OvrObjective {
 public:
  OvrObjective(const RowMatrix& x, const RowMatrix& y, double c) : x_(x), y_(y), c_(c) {}

  void operator()(const std::vector<int>& problems, const RowMatrix& points, std::vector<double>& losses,
                  RowMatrix& grads) {
    const Eigen::Index n = x_.rows();
    const auto m = static_cast<Eigen::Index>(problems.size());
    z_.noalias() = x_ * points.transpose();  // n x m
    r_.resize(n, m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const int c = problems[j];
      double data_loss = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double yi = y_(i, c);
        const double margin = yi * z_(i, j);
        data_loss += LogisticLoss(margin);
        r_(i, j) = c_ * (Sigmoid(margin) - 1.0) * yi;
      }
      losses[j] = 0.5 * points.row(j).squaredNorm() + c_ * data_loss;
    }
    grads.noalias() = (x_.transpose() * r_).transpose();
    grads += points;
  }

 private:
  const RowMatrix& x_;
  const RowMatrix& y_;
  double c_;
  Eigen::MatrixXd z_, r_;
};

}  // namespace detail

// Balance, scale to [-1,1], append the bias feature and fit one L2-regularised
// logistic regression per class against the rest.
inline LinearModel TrainLinear(const LabeledFrameSet& data, const LearnerConfig& config = {},
                               TrainingReport* report = nullptr);

// Same as TrainLinear on {rows, labels, class_ids} without copying rows.
inline LinearModel TrainLinearRows(const Eigen::Ref<const RowMatrix>& rows, const std::vector<int>& labels,
                                   const std::vector<int>& class_ids, const LearnerConfig& config = {},
                                   TrainingReport* report = nullptr) {
  if (static_cast<std::size_t>(rows.rows()) != labels.size())
    throw Error(ErrorCode::kLengthMismatch, "rows and labels differ in length");
  if (!(config.regularization_c >= 0)) throw Error(ErrorCode::kValidationError, "C must be non-negative");
  if (!rows.allFinite()) throw Error(ErrorCode::kNonFinite, "training data contains non-finite values");
  const LabeledFrameSet balanced = BalanceRows(rows, labels, class_ids, config.balance ? config.seed : 0,
                                               config.balance);
  std::vector<int> classes;
  for (int id : balanced.class_ids)
    if (std::find(balanced.labels.begin(), balanced.labels.end(), id) != balanced.labels.end())
      classes.push_back(id);
  if (classes.size() < 2)
    throw Error(ErrorCode::kDegenerateData, "need at least two classes, have " + std::to_string(classes.size()));

  LinearModel model;
  model.bias_value = config.bias_value;
  model.regularization_c = config.regularization_c;
  model.class_ids = classes;
  model.scaler = FitScaler(balanced.rows);
  const RowMatrix x = detail::WithBias(ApplyScaler(model.scaler, balanced.rows), config.bias_value);
  detail::RequireFinite(x, "scaled training data");

  const Eigen::Index n = x.rows();
  const int k = static_cast<int>(classes.size());
  RowMatrix y(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) y(i, c) = balanced.labels[i] == classes[c] ? 1.0 : -1.0;

  detail::OvrObjective ovr(x, y, config.regularization_c);
  const BatchObjective objective = [&ovr](const std::vector<int>& problems, const RowMatrix& points,
                                          std::vector<double>& losses, RowMatrix& grads) {
    ovr(problems, points, losses, grads);
  };

  MinimizerOptions opt;
  opt.tolerance = config.tolerance;
  opt.max_iterations = config.max_iterations;
  auto results = MinimizeLbfgsBatch(k, RowMatrix::Zero(k, x.cols()), objective, opt);
  model.weights.resize(k, x.cols());
  for (int c = 0; c < k; ++c) model.weights.row(c) = results[c].x.transpose();
  detail::RequireFinite(model.weights, "learned weights");
  if (report) {
    report->per_class = std::move(results);
    report->balanced_rows = n;
  }
  return model;
}

inline LinearModel TrainLinear(const LabeledFrameSet& data, const LearnerConfig& config, TrainingReport* report) {
  data.Validate();
  return TrainLinearRows(data.rows, data.labels, data.class_ids, config, report);
}

// Per-class one-vs-rest sigmoid scores renormalised to sum to one. Scores are
// floored at 1e-12 so every probability lies strictly inside (0,1).
inline RowMatrix PredictProba(const LinearModel& model, const RowMatrix& rows) {
  if (rows.cols() != model.dim())
    throw Error(ErrorCode::kDimensionMismatch,
                "model expects dim " + std::to_string(model.dim()) + ", got " + std::to_string(rows.cols()));
  const RowMatrix x = ApplyScaler(model.scaler, rows);
  RowMatrix p = x * model.weights.leftCols(model.dim()).transpose();
  p.rowwise() += (model.bias_value * model.weights.col(model.dim())).transpose();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      p(i, c) = std::max(detail::Sigmoid(p(i, c)), 1e-12);
      sum += p(i, c);
    }
    p.row(i) /= sum;
  }
  return p;
}

// Index of the largest entry per row; first wins on ties.
inline std::vector<Eigen::Index> ArgmaxRows(const RowMatrix& probabilities) {
  std::vector<Eigen::Index> out(static_cast<std::size_t>(probabilities.rows()));
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) probabilities.row(i).maxCoeff(&out[i]);
  return out;
}

inline std::vector<int> PredictLabels(const LinearModel& model, const RowMatrix& rows) {
  const auto idx = ArgmaxRows(PredictProba(model, rows));
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = model.class_ids[idx[i]];
  return out;
}

// --- model file -------------------------------------------------------------

inline nlohmann::json ToJson(const LinearModel& m) {
  nlohmann::json weights = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.weights.rows(); ++r) {
    std::vector<double> row(m.weights.row(r).data(), m.weights.row(r).data() + m.weights.cols());
    weights.push_back(row);
  }
  return {{"format", "cml-linear-model"},
          {"version", 1},
          {"class_ids", m.class_ids},
          {"bias_value", m.bias_value},
          {"regularization_c", m.regularization_c},
          {"scaler",
           {{"min", std::vector<double>(m.scaler.min.data(), m.scaler.min.data() + m.scaler.min.size())},
            {"max", std::vector<double>(m.scaler.max.data(), m.scaler.max.data() + m.scaler.max.size())}}},
          {"weights", weights}};
}

inline LinearModel LinearModelFromJson(const nlohmann::json& j) {
  try {
    if (j.at("format") != "cml-linear-model" || j.at("version") != 1)
      throw Error(ErrorCode::kUnsupportedFormat, "not a version 1 linear model");
    LinearModel m;
    m.class_ids = j.at("class_ids").get<std::vector<int>>();
    m.bias_value = j.at("bias_value").get<double>();
    m.regularization_c = j.at("regularization_c").get<double>();
    const auto lo = j.at("scaler").at("min").get<std::vector<double>>();
    const auto hi = j.at("scaler").at("max").get<std::vector<double>>();
    m.scaler.min = Eigen::Map<const Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    m.scaler.max = Eigen::Map<const Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    const auto& w = j.at("weights");
    m.weights.resize(static_cast<Eigen::Index>(w.size()), static_cast<Eigen::Index>(lo.size() + 1));
    for (std::size_t r = 0; r < w.size(); ++r) {
      const auto row = w[r].get<std::vector<double>>();
      if (row.size() != lo.size() + 1) throw Error(ErrorCode::kCorruptHeader, "weight row has wrong length");
      for (std::size_t c = 0; c < row.size(); ++c) m.weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
    }
    if (m.class_ids.size() != w.size() || m.class_ids.size() < 2 || hi.size() != lo.size())
      throw Error(ErrorCode::kCorruptHeader, "inconsistent model shape");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptHeader, std::string("bad model document: ") + e.what());
  }
}

inline void SaveModel(const std::filesystem::path& path, const LinearModel& model) {
  const std::string text = ToJson(model).dump();
  detail::WriteFileAtomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline LinearModel LoadModel(const std::filesystem::path& path) {
  const auto bytes = detail::ReadFileBytes(path);
  try {
    return LinearModelFromJson(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kCorruptHeader, std::string("model file is not JSON: ") + e.what());
  }
}

}  // namespace cml
