// cml/engine.hpp

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

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cml/annotation.hpp"
#include "cml/learner.hpp"
#include "cml/metrics.hpp"

namespace cml {

struct CompletionConfig {
  double confidence_threshold = 0.5;
  double min_duration_s = 0.08;
  double max_gap_s = 0.04;
  LearnerConfig learner;
  std::string machine_annotator = kMachineAnnotator;

  void Validate() const {
    if (!(confidence_threshold >= 0.0 && confidence_threshold <= 1.0))
      throw Error(ErrorCode::kValidationError, "confidence threshold must lie in [0,1]");
    if (!(min_duration_s >= 0.0) || !(max_gap_s >= 0.0))
      throw Error(ErrorCode::kValidationError, "post-processing thresholds must be non-negative");
  }
};

// One recording: its feature stream and, when available, its annotation.
struct SessionBundle {
  std::string session_id;
  std::shared_ptr<const FeatureStream> stream;
  std::optional<DiscreteAnnotation> annotation;
};

namespace detail {

inline FrameLabels PredictFrames(const LinearModel& model, const RowMatrix& rows, const Scheme& scheme,
                                 double frame_step_s, double start_time_s) {
  FrameLabels out;
  RowMatrix p = PredictProba(model, rows);
  const auto idx = ArgmaxRows(p);
  out.class_ids.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out.class_ids[i] = model.class_ids[idx[i]];
  out.probabilities = std::move(p);
  out.probability_class_ids = model.class_ids;
  out.rest_class_id = scheme.rest_class_id;
  out.frame_step_s = frame_step_s;
  out.start_time_s = start_time_s;
  return out;
}

inline const FeatureStream& RequireStream(const SessionBundle& b) {
  if (!b.stream) throw Error(ErrorCode::kValidationError, "session " + b.session_id + " has no feature stream");
  return *b.stream;
}

}  // namespace detail

// Trains on the labelled prefix of one session and appends the predicted
// segments for the remainder. Manual segments are returned untouched.
inline DiscreteAnnotation CompleteSession(const SessionBundle& bundle, const CompletionConfig& config = {}) {
  config.Validate();
  if (!bundle.annotation) throw Error(ErrorCode::kEmptyAnnotation, "session " + bundle.session_id + " has no annotation");
  const FeatureStream& stream = detail::RequireStream(bundle);
  const DiscreteAnnotation& manual = *bundle.annotation;
  TrainingSplit split = SplitAtLastLabel(manual, stream);
  DiscreteAnnotation out = manual;
  if (split.predict_rows.rows() == 0) return out;

  const LinearModel model = TrainLinear(split.train, config.learner);
  const FrameLabels predicted =
      detail::PredictFrames(model, split.predict_rows, manual.scheme, stream.frame_step_s,
                            stream.start_time_s + static_cast<double>(split.split_frame) * stream.frame_step_s);
  double last_end = 0.0;
  for (const Segment& s : manual.segments) last_end = std::max(last_end, s.to_s);
  for (Segment s : FramesToSegments(predicted, config.min_duration_s, config.max_gap_s)) {
    // The boundary frame may start inside the last manual segment.
    s.from_s = std::max(s.from_s, last_end);
    if (s.to_s > s.from_s) out.segments.push_back(s);
  }
  return out;
}

// Session-independent model from fully labelled sessions.
inline LinearModel TrainPoolModel(const std::vector<SessionBundle>& bundles, const LearnerConfig& learner = {}) {
  if (bundles.empty()) throw Error(ErrorCode::kValidationError, "empty session pool");
  std::string unfinished;
  for (const auto& b : bundles)
    if (!b.annotation || !b.annotation->is_finished) unfinished += (unfinished.empty() ? "" : ",") + b.session_id;
  if (!unfinished.empty()) throw Error(ErrorCode::kUnfinishedAnnotation, "unfinished sessions: " + unfinished);
  LabeledFrameSet pool;
  for (const auto& b : bundles) {
    const FeatureStream& s = detail::RequireStream(b);
    Append(pool, LabelRows(*b.annotation, s, s.rows()));
  }
  return TrainLinear(pool, learner);
}

// Predicts a whole session with an existing model; the result belongs to the
// machine annotator.
inline DiscreteAnnotation TransferSession(const LinearModel& model, const SessionBundle& bundle, const Scheme& scheme,
                                          const CompletionConfig& config = {}) {
  config.Validate();
  const FeatureStream& stream = detail::RequireStream(bundle);
  if (stream.dim() != model.dim())
    throw Error(ErrorCode::kDimensionMismatch, "model expects dim " + std::to_string(model.dim()) + ", stream has " +
                                                   std::to_string(stream.dim()));
  const FrameLabels predicted =
      detail::PredictFrames(model, stream.frames, scheme, stream.frame_step_s, stream.start_time_s);
  DiscreteAnnotation out;
  out.scheme = scheme;
  out.session_id = bundle.session_id;
  out.role = bundle.annotation ? bundle.annotation->role : std::string();
  out.annotator_id = config.machine_annotator;
  out.segments = FramesToSegments(predicted, config.min_duration_s, config.max_gap_s);
  return out;
}

inline DiscreteAnnotation TransferSession(const LinearModel& model, const SessionBundle& bundle,
                                          const CompletionConfig& config = {}) {
  if (!bundle.annotation)
    throw Error(ErrorCode::kValidationError, "session " + bundle.session_id + " carries no scheme; pass one explicitly");
  return TransferSession(model, bundle, bundle.annotation->scheme, config);
}

struct EvaluationResult {
  RecallSummary recall;
  std::optional<AucSummary> auc;  // absent when the truth holds a single class
};

// Frame-level confusion of ground truth against argmax predictions, rest
// class included.
inline EvaluationResult EvaluateModel(const LinearModel& model, const std::vector<SessionBundle>& bundles) {
  std::string unfinished;
  for (const auto& b : bundles)
    if (!b.annotation || !b.annotation->is_finished) unfinished += (unfinished.empty() ? "" : ",") + b.session_id;
  if (!unfinished.empty()) throw Error(ErrorCode::kUnfinishedAnnotation, "unfinished sessions: " + unfinished);
  std::vector<int> truth, pred;
  std::vector<RowMatrix> probs;
  Eigen::Index total = 0;
  std::vector<int> order = model.class_ids;
  for (const auto& b : bundles) {
    const FeatureStream& s = detail::RequireStream(b);
    if (s.dim() != model.dim())
      throw Error(ErrorCode::kDimensionMismatch, "session " + b.session_id + " has dim " + std::to_string(s.dim()));
    const FrameLabels t = SegmentsToFrameCount(*b.annotation, s.frame_step_s, static_cast<std::size_t>(s.rows()),
                                               s.start_time_s);
    for (int id : b.annotation->scheme.AllIds())
      if (std::find(order.begin(), order.end(), id) == order.end()) order.push_back(id);
    truth.insert(truth.end(), t.class_ids.begin(), t.class_ids.end());
    probs.push_back(PredictProba(model, s.frames));
    for (auto i : ArgmaxRows(probs.back())) pred.push_back(model.class_ids[i]);
    total += s.rows();
  }
  // Keep only classes that occur somewhere, in model order first.
  std::vector<int> used;
  for (int id : order)
    if (std::find(truth.begin(), truth.end(), id) != truth.end() || std::find(pred.begin(), pred.end(), id) != pred.end())
      used.push_back(id);
  EvaluationResult out;
  out.recall = SummarizeConfusion(Confusion(truth, pred, used));
  RowMatrix all(total, model.num_classes());
  Eigen::Index r = 0;
  for (const auto& p : probs) {
    all.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  try {
    out.auc = RocAucOvr(truth, all, model.class_ids);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kSingleClass) throw;
  }
  return out;
}

inline nlohmann::json ToJson(const EvaluationResult& r) {
  return {{"recall", ToJson(r.recall)}, {"auc", r.auc ? ToJson(*r.auc) : nlohmann::json(nullptr)}};
}

}  // namespace cml
