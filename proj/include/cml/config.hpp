// cml/config.hpp

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

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cml/engine.hpp"
#include "cml/features.hpp"

// JSON form of the tunables. A config document has up to three sections:
//
//   {"features":   {"window_s", "step_s", "num_ceps", "average_group", "context_n",
//                   "pre_emphasis", "mel_filters", "fft_size", "delta_window"},
//    "learner":    {"c", "bias", "seed", "tolerance", "max_iterations", "balance"},
//    "completion": {"threshold", "min_duration_s", "max_gap_s", "machine_annotator"}}
//
// Missing keys keep their defaults.

namespace cml {

inline void Apply(const nlohmann::json& j, FeatureConfig& c) {
  c.window_s = j.value("window_s", c.window_s);
  c.step_s = j.value("step_s", c.step_s);
  c.num_ceps = j.value("num_ceps", c.num_ceps);
  c.average_group = j.value("average_group", c.average_group);
  c.context_n = j.value("context_n", c.context_n);
  c.pre_emphasis_coeff = j.value("pre_emphasis", c.pre_emphasis_coeff);
  c.mel_filters = j.value("mel_filters", c.mel_filters);
  c.fft_size = j.value("fft_size", c.fft_size);
  c.delta_window = j.value("delta_window", c.delta_window);
}

inline void Apply(const nlohmann::json& j, LearnerConfig& c) {
  c.regularization_c = j.value("c", c.regularization_c);
  c.bias_value = j.value("bias", c.bias_value);
  c.seed = j.value("seed", c.seed);
  c.tolerance = j.value("tolerance", c.tolerance);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.balance = j.value("balance", c.balance);
}

inline void Apply(const nlohmann::json& j, CompletionConfig& c) {
  c.confidence_threshold = j.value("threshold", c.confidence_threshold);
  c.min_duration_s = j.value("min_duration_s", c.min_duration_s);
  c.max_gap_s = j.value("max_gap_s", c.max_gap_s);
  c.machine_annotator = j.value("machine_annotator", c.machine_annotator);
}

struct ToolConfig {
  FeatureConfig features;
  LearnerConfig learner;
  CompletionConfig completion;

  void Apply(const nlohmann::json& j) {
    try {
      if (j.contains("features")) cml::Apply(j["features"], features);
      if (j.contains("learner")) cml::Apply(j["learner"], learner);
      if (j.contains("completion")) cml::Apply(j["completion"], completion);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kValidationError, std::string("bad config: ") + e.what());
    }
    completion.learner = learner;
  }
};

inline nlohmann::json ToJson(const FeatureConfig& c) {
  return {{"window_s", c.window_s},       {"step_s", c.step_s},
          {"num_ceps", c.num_ceps},       {"average_group", c.average_group},
          {"context_n", c.context_n},     {"pre_emphasis", c.pre_emphasis_coeff},
          {"mel_filters", c.mel_filters}, {"fft_size", c.fft_size},
          {"delta_window", c.delta_window}};
}

inline nlohmann::json ToJson(const LearnerConfig& c) {
  return {{"c", c.regularization_c}, {"bias", c.bias_value},           {"seed", c.seed},
          {"tolerance", c.tolerance}, {"max_iterations", c.max_iterations}, {"balance", c.balance}};
}

inline nlohmann::json ToJson(const CompletionConfig& c) {
  return {{"threshold", c.confidence_threshold},
          {"min_duration_s", c.min_duration_s},
          {"max_gap_s", c.max_gap_s},
          {"machine_annotator", c.machine_annotator}};
}

inline nlohmann::json ToJson(const ToolConfig& c) {
  return {{"features", ToJson(c.features)}, {"learner", ToJson(c.learner)}, {"completion", ToJson(c.completion)}};
}

// "default" (or an empty path) yields the built-in defaults.
inline ToolConfig LoadToolConfig(const std::string& path) {
  ToolConfig cfg;
  if (path.empty() || path == "default") return cfg;
  const auto bytes = detail::ReadFileBytes(path);
  try {
    cfg.Apply(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kValidationError, "config " + path + " is not JSON: " + e.what());
  }
  return cfg;
}

}  // namespace cml
