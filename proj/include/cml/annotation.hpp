// cml/annotation.hpp

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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cml/dataset.hpp"
#include "cml/error.hpp"
#include "cml/features.hpp"

namespace cml {

// Annotator id under which machine-produced annotations are stored.
inline constexpr const char* kMachineAnnotator = "machine";

struct SchemeClass {
  int id = 0;
  std::string label;
  std::string color;
};

struct Scheme {
  std::string name;
  std::vector<SchemeClass> classes;
  int rest_class_id = -1;
  std::string rest_label = "REST";

  // Position of id in the class list; -1 when absent (including the rest id).
  int IndexOf(int id) const {
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i].id == id) return static_cast<int>(i);
    return -1;
  }
  bool Contains(int id) const { return IndexOf(id) >= 0; }

  // Class ids in scheme order followed by the rest id.
  std::vector<int> AllIds() const {
    std::vector<int> ids;
    for (const auto& c : classes) ids.push_back(c.id);
    ids.push_back(rest_class_id);
    return ids;
  }

  std::string LabelOf(int id) const {
    if (id == rest_class_id) return rest_label;
    const int i = IndexOf(id);
    return i >= 0 ? classes[i].label : std::to_string(id);
  }

  void Validate() const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i].label.empty())
        throw Error(ErrorCode::kInvalidAnnotation, "scheme class with empty label");
      if (classes[i].id == rest_class_id)
        throw Error(ErrorCode::kInvalidAnnotation, "rest class id collides with a class id");
      for (std::size_t j = 0; j < i; ++j)
        if (classes[j].id == classes[i].id)
          throw Error(ErrorCode::kInvalidAnnotation, "duplicate class id " + std::to_string(classes[i].id));
    }
  }
};

struct Segment {
  double from_s = 0.0;
  double to_s = 0.0;
  int class_id = 0;
  double confidence = 1.0;

  double duration() const { return to_s - from_s; }
  bool operator==(const Segment&) const = default;
};

struct DiscreteAnnotation {
  Scheme scheme;
  std::vector<Segment> segments;  // sorted by from_s, non-overlapping
  std::string session_id;
  std::string role;
  std::string annotator_id;
  bool is_finished = false;
  bool is_locked = false;

  void Validate() const {
    scheme.Validate();
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const Segment& s = segments[i];
      if (!(s.from_s < s.to_s) || !std::isfinite(s.from_s) || !std::isfinite(s.to_s))
        throw Error(ErrorCode::kInvalidAnnotation, "segment " + std::to_string(i) + " has from >= to");
      if (!(s.confidence >= 0.0 && s.confidence <= 1.0))
        throw Error(ErrorCode::kInvalidAnnotation, "segment " + std::to_string(i) + " confidence outside [0,1]");
      if (!scheme.Contains(s.class_id))
        throw Error(ErrorCode::kInvalidAnnotation, "segment " + std::to_string(i) + " uses unknown class " +
                                                       std::to_string(s.class_id));
      if (i > 0 && s.from_s < segments[i - 1].to_s - 1e-9)
        throw Error(ErrorCode::kInvalidAnnotation, "segments " + std::to_string(i - 1) + " and " +
                                                       std::to_string(i) + " overlap or are unsorted");
    }
  }
};

// Indices of segments whose confidence is strictly below the threshold.
inline std::vector<std::size_t> FlaggedSegments(const DiscreteAnnotation& a, double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < a.segments.size(); ++i)
    if (a.segments[i].confidence < threshold) out.push_back(i);
  return out;
}

// Per-frame class ids on a uniform grid, optionally with class probabilities.
// Column j of probabilities belongs to probability_class_ids[j].
struct FrameLabels {
  std::vector<int> class_ids;
  std::optional<RowMatrix> probabilities;
  std::vector<int> probability_class_ids;
  int rest_class_id = -1;
  double frame_step_s = 0.04;
  double start_time_s = 0.0;

  std::size_t size() const { return class_ids.size(); }
};

namespace detail {
inline constexpr double kTimeEps = 1e-9;
}

// Frame k covers [start + k*step, start + (k+1)*step). A frame takes class c
// when the summed overlap with segments of c is at least half a frame and
// maximal; equal overlaps go to the class listed first in the scheme.
inline FrameLabels SegmentsToFrameCount(const DiscreteAnnotation& annotation, double frame_step_s,
                                        std::size_t frame_count, double start_time_s = 0.0) {
  if (!(frame_step_s > 0)) throw Error(ErrorCode::kValidationError, "frame step must be positive");
  const auto& classes = annotation.scheme.classes;
  const std::size_t nc = classes.size();
  std::vector<double> overlap(frame_count * nc, 0.0);
  for (const Segment& s : annotation.segments) {
    const int ci = annotation.scheme.IndexOf(s.class_id);
    if (ci < 0) continue;
    const double a = (s.from_s - start_time_s) / frame_step_s;
    const double b = (s.to_s - start_time_s) / frame_step_s;
    const auto first = static_cast<long long>(std::max(0.0, std::floor(a)));
    const auto last = std::min(static_cast<long long>(frame_count), static_cast<long long>(std::ceil(b)));
    for (long long k = first; k < last; ++k) {
      const double fs = start_time_s + k * frame_step_s;
      const double fe = start_time_s + (k + 1) * frame_step_s;
      const double ov = std::min(fe, s.to_s) - std::max(fs, s.from_s);
      if (ov > 0) overlap[static_cast<std::size_t>(k) * nc + ci] += ov;
    }
  }
  FrameLabels out;
  out.class_ids.assign(frame_count, annotation.scheme.rest_class_id);
  out.rest_class_id = annotation.scheme.rest_class_id;
  out.frame_step_s = frame_step_s;
  out.start_time_s = start_time_s;
  const double eps = detail::kTimeEps * std::max(1.0, frame_step_s);
  const double half = 0.5 * frame_step_s - eps;
  for (std::size_t k = 0; k < frame_count; ++k) {
    int best = -1;
    double best_ov = 0.0;
    for (std::size_t c = 0; c < nc; ++c) {
      const double ov = overlap[k * nc + c];
      if (best < 0 ? ov >= half : ov > best_ov + eps) {
        best = static_cast<int>(c);
        best_ov = ov;
      }
    }
    if (best >= 0) out.class_ids[k] = classes[best].id;
  }
  return out;
}

inline FrameLabels SegmentsToFrames(const DiscreteAnnotation& annotation, double frame_step_s,
                                    double span_end_s) {
  if (!(frame_step_s > 0)) throw Error(ErrorCode::kValidationError, "frame step must be positive");
  const double frames = std::ceil(span_end_s / frame_step_s - detail::kTimeEps);
  return SegmentsToFrameCount(annotation, frame_step_s, static_cast<std::size_t>(std::max(0.0, frames)));
}

// Collapses runs of equal non-rest classes into segments whose confidence is
// the mean class probability over the run, fills same-class gaps of at most
// max_gap_s, then drops segments shorter than min_duration_s.
inline std::vector<Segment> FramesToSegments(const FrameLabels& frames, double min_duration_s,
                                             double max_gap_s) {
  int prob_col_cache_id = 0;
  int prob_col_cache = -1;
  auto prob_col = [&](int id) {
    if (prob_col_cache >= 0 && prob_col_cache_id == id) return prob_col_cache;
    const auto& ids = frames.probability_class_ids;
    const auto it = std::find(ids.begin(), ids.end(), id);
    prob_col_cache_id = id;
    prob_col_cache = it == ids.end() ? -1 : static_cast<int>(it - ids.begin());
    return prob_col_cache;
  };

  std::vector<Segment> runs;
  const std::size_t n = frames.size();
  const double step = frames.frame_step_s;
  std::size_t k = 0;
  while (k < n) {
    const int id = frames.class_ids[k];
    std::size_t end = k + 1;
    while (end < n && frames.class_ids[end] == id) ++end;
    if (id != frames.rest_class_id) {
      double conf = 1.0;
      if (frames.probabilities) {
        const int col = prob_col(id);
        double sum = 0.0;
        if (col >= 0)
          for (std::size_t i = k; i < end; ++i) sum += (*frames.probabilities)(static_cast<Eigen::Index>(i), col);
        conf = sum / static_cast<double>(end - k);
      }
      runs.push_back({frames.start_time_s + k * step, frames.start_time_s + end * step, id,
                      std::clamp(conf, 0.0, 1.0)});
    }
    k = end;
  }

  std::vector<Segment> merged;
  for (const Segment& s : runs) {
    if (!merged.empty()) {
      Segment& prev = merged.back();
      if (prev.class_id == s.class_id && s.from_s - prev.to_s <= max_gap_s + detail::kTimeEps) {
        const double d1 = prev.duration(), d2 = s.duration();
        prev.confidence = std::clamp((prev.confidence * d1 + s.confidence * d2) / (d1 + d2), 0.0, 1.0);
        prev.to_s = s.to_s;
        continue;
      }
    }
    merged.push_back(s);
  }

  std::vector<Segment> out;
  for (const Segment& s : merged)
    if (s.duration() >= min_duration_s - detail::kTimeEps) out.push_back(s);
  return out;
}

struct TrainingSplit {
  LabeledFrameSet train;
  RowMatrix predict_rows;
  Eigen::Index split_frame = 0;
};

// Ids present in labels, in scheme order with the rest id last.
inline std::vector<int> PresentClassIds(const Scheme& scheme, const std::vector<int>& labels) {
  std::vector<int> present;
  for (int id : scheme.AllIds())
    if (std::find(labels.begin(), labels.end(), id) != labels.end()) present.push_back(id);
  return present;
}

inline LabeledFrameSet LabelRows(const DiscreteAnnotation& annotation, const FeatureStream& stream,
                                 Eigen::Index frame_count) {
  const FrameLabels labels =
      SegmentsToFrameCount(annotation, stream.frame_step_s, static_cast<std::size_t>(frame_count),
                           stream.start_time_s);
  LabeledFrameSet set;
  set.rows = stream.frames.topRows(frame_count);
  set.labels = labels.class_ids;
  set.class_ids = PresentClassIds(annotation.scheme, set.labels);
  return set;
}

// The frame that coincides with the end of the last segment separates the
// labelled training prefix from the rows still to be predicted.
inline TrainingSplit SplitAtLastLabel(const DiscreteAnnotation& annotation, const FeatureStream& stream) {
  if (annotation.segments.empty()) throw Error(ErrorCode::kEmptyAnnotation, "annotation has no segments");
  double last_end = annotation.segments.front().to_s;
  for (const Segment& s : annotation.segments) last_end = std::max(last_end, s.to_s);
  const double pos = (last_end - stream.start_time_s) / stream.frame_step_s;
  auto split = static_cast<Eigen::Index>(std::floor(pos + detail::kTimeEps));
  split = std::clamp<Eigen::Index>(split, 0, stream.rows());
  TrainingSplit out;
  out.split_frame = split;
  out.train = LabelRows(annotation, stream, split);
  out.predict_rows = stream.frames.bottomRows(stream.rows() - split);
  return out;
}

// --- JSON -------------------------------------------------------------------

inline nlohmann::json ToJson(const Scheme& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : s.classes) classes.push_back({{"id", c.id}, {"label", c.label}, {"color", c.color}});
  return {{"name", s.name}, {"classes", classes}, {"rest_id", s.rest_class_id}, {"rest_label", s.rest_label}};
}

inline Scheme SchemeFromJson(const nlohmann::json& j) {
  try {
    Scheme s;
    s.name = j.at("name").get<std::string>();
    for (const auto& c : j.at("classes"))
      s.classes.push_back({c.at("id").get<int>(), c.at("label").get<std::string>(), c.value("color", std::string())});
    s.rest_class_id = j.value("rest_id", -1);
    s.rest_label = j.value("rest_label", std::string("REST"));
    s.Validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidAnnotation, std::string("bad scheme document: ") + e.what());
  }
}

inline nlohmann::json SegmentsToJson(const std::vector<Segment>& segments) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : segments)
    arr.push_back({{"from", s.from_s}, {"to", s.to_s}, {"id", s.class_id}, {"conf", s.confidence}});
  return arr;
}

inline std::vector<Segment> SegmentsFromJson(const nlohmann::json& arr) {
  std::vector<Segment> out;
  try {
    for (const auto& s : arr)
      out.push_back({s.at("from").get<double>(), s.at("to").get<double>(), s.at("id").get<int>(),
                     s.value("conf", 1.0)});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidAnnotation, std::string("bad segment list: ") + e.what());
  }
  return out;
}

inline nlohmann::json ToJson(const DiscreteAnnotation& a) {
  return {{"scheme", ToJson(a.scheme)},   {"session", a.session_id},     {"role", a.role},
          {"annotator", a.annotator_id},  {"is_finished", a.is_finished}, {"is_locked", a.is_locked},
          {"segments", SegmentsToJson(a.segments)}};
}

inline DiscreteAnnotation AnnotationFromJson(const nlohmann::json& j) {
  try {
    DiscreteAnnotation a;
    a.scheme = SchemeFromJson(j.at("scheme"));
    a.session_id = j.value("session", std::string());
    a.role = j.value("role", std::string());
    a.annotator_id = j.value("annotator", std::string());
    a.is_finished = j.value("is_finished", false);
    a.is_locked = j.value("is_locked", false);
    a.segments = SegmentsFromJson(j.value("segments", nlohmann::json::array()));
    a.Validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidAnnotation, std::string("bad annotation document: ") + e.what());
  }
}

inline void SaveAnnotation(const std::filesystem::path& path, const DiscreteAnnotation& a) {
  const std::string text = ToJson(a).dump(2) + "\n";
  detail::WriteFileAtomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline DiscreteAnnotation LoadAnnotation(const std::filesystem::path& path) {
  const auto bytes = detail::ReadFileBytes(path);
  try {
    return AnnotationFromJson(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kInvalidAnnotation, path.string() + " is not JSON: " + e.what());
  }
}

}  // namespace cml
