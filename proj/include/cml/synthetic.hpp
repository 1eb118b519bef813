// cml/synthetic.hpp

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
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "cml/engine.hpp"

// Synthetic conversational-audio corpus with exact ground truth: three
// band-limited noise classes over a noise floor, with per-session gain,
// spectral shift and floor perturbations so that sessions differ the way
// speakers and microphones do.

namespace cml::synthetic {

inline Scheme VoiceScheme() {
  Scheme s;
  s.name = "voice";
  s.classes = {{1, "SPEECH", "#1f77b4"}, {2, "BREATH", "#2ca02c"}, {3, "FILLER", "#d62728"}};
  s.rest_class_id = 0;
  s.rest_label = "SILENCE";
  return s;
}

struct SessionOptions {
  double duration_s = 120.0;
  int sample_rate_hz = 8000;
};

struct SyntheticSession {
  AudioBuffer audio;
  DiscreteAnnotation truth;
};

namespace detail {

// Two cascaded RBJ band-pass biquads (0 dB peak).
class BandPass {
 public:
  BandPass(double centre_hz, double q, double sample_rate) {
    const double w0 = 2.0 * std::numbers::pi * centre_hz / sample_rate;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0_ = alpha / a0;
    b2_ = -alpha / a0;
    a1_ = -2.0 * std::cos(w0) / a0;
    a2_ = (1.0 - alpha) / a0;
  }

  double operator()(double x) {
    for (auto& st : stages_) {
      const double y = b0_ * x + b2_ * st.x2 - a1_ * st.y1 - a2_ * st.y2;
      st.x2 = st.x1;
      st.x1 = x;
      st.y2 = st.y1;
      st.y1 = y;
      x = y;
    }
    return x;
  }

 private:
  struct Stage {
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  };
  double b0_, b2_, a1_, a2_;
  Stage stages_[2];
};

inline double Uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

inline double Gaussian(std::mt19937_64& rng) {
  double u1 = Uniform(rng, 0.0, 1.0);
  while (u1 <= 1e-300) u1 = Uniform(rng, 0.0, 1.0);
  const double u2 = Uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double DbToGain(double db) { return std::pow(10.0, db / 20.0); }

}  // namespace detail

// Deterministic in (corpus_seed, session_index).
struct Difficulty {
  double session_gain_db = 10.0;            // +- range of the session gain
  double shift_lo = 0.85, shift_hi = 1.18;  // spectral shift factor
  double floor_lo = 0.01, floor_hi = 0.025;
  double class_gain_db = 3.0;               // +- per session and class
  double event_gain_db = 10.0;              // +- per event
  double event_centre_jitter = 0.15;        // relative, per event
  double speech_centre_hz = 650.0;
  double breath_level = 0.03;
  double filler_centre_hz = 740.0;
};

// Deterministic in (corpus_seed, session_index).
inline SyntheticSession GenerateSession(std::uint64_t corpus_seed, int session_index, const SessionOptions& opt = {},
                                        const Difficulty& diff = {}) {
  using detail::Uniform;
  std::mt19937_64 rng(corpus_seed * 1000003ULL + static_cast<std::uint64_t>(session_index) * 7919ULL + 17ULL);
  const double sr = opt.sample_rate_hz;
  const auto n = static_cast<std::size_t>(std::llround(opt.duration_s * sr));

  // Session-level perturbations.
  const double session_gain = detail::DbToGain(Uniform(rng, -diff.session_gain_db, diff.session_gain_db));
  const double shift = Uniform(rng, diff.shift_lo, diff.shift_hi);
  const double floor_level = Uniform(rng, diff.floor_lo, diff.floor_hi);
  struct ClassVoice {
    int id;
    double centre_hz, q, level, min_dur, max_dur, weight;
  };
  std::vector<ClassVoice> voices = {
      {1, diff.speech_centre_hz, 1.2, 0.30, 0.8, 3.0, 0.5},
      {2, 2000.0, 0.8, diff.breath_level, 0.4, 1.2, 0.25},
      {3, diff.filler_centre_hz, 2.0, 0.18, 0.25, 0.9, 0.25},
  };
  for (auto& v : voices) {
    v.centre_hz *= shift;
    v.level *= detail::DbToGain(Uniform(rng, -diff.class_gain_db, diff.class_gain_db));
  }

  // Event layout: silence gap, event, silence gap, ...
  SyntheticSession out;
  out.truth.scheme = VoiceScheme();
  out.truth.session_id = "synthetic-" + std::to_string(session_index);
  out.truth.role = "speaker";
  out.truth.annotator_id = "truth";
  out.truth.is_finished = true;
  struct Event {
    std::size_t voice;
    double centre_hz, level;
  };
  std::vector<Event> events;
  double t = Uniform(rng, 0.2, 1.5);
  while (true) {
    const double pick = Uniform(rng, 0.0, 1.0);
    std::size_t vi = 0;
    double acc = voices[0].weight;
    while (pick > acc && vi + 1 < voices.size()) acc += voices[++vi].weight;
    const double dur = Uniform(rng, voices[vi].min_dur, voices[vi].max_dur);
    const double from = std::round(t * 1000.0) / 1000.0;
    const double to = std::round((t + dur) * 1000.0) / 1000.0;
    if (to > opt.duration_s - 0.2) break;
    out.truth.segments.push_back({from, to, voices[vi].id, 1.0});
    const double centre = voices[vi].centre_hz *
                          (1.0 + Uniform(rng, -diff.event_centre_jitter, diff.event_centre_jitter));
    events.push_back({vi, std::min(centre, 0.45 * sr),
                      voices[vi].level * detail::DbToGain(Uniform(rng, -diff.event_gain_db, diff.event_gain_db))});
    t = to + Uniform(rng, 0.3, 2.0);
  }

  std::vector<double> mix(n);
  for (std::size_t i = 0; i < n; ++i) mix[i] = floor_level * detail::Gaussian(rng);
  const double ramp = 0.01;
  for (std::size_t e = 0; e < events.size(); ++e) {
    const Segment& s = out.truth.segments[e];
    const ClassVoice& v = voices[events[e].voice];
    detail::BandPass filter(events[e].centre_hz, v.q, sr);
    const auto first = static_cast<std::size_t>(std::ceil(s.from_s * sr));
    const auto last = std::min(n, static_cast<std::size_t>(std::ceil(s.to_s * sr)));
    for (std::size_t i = first; i < last; ++i) {
      const double time = static_cast<double>(i) / sr;
      double g = std::min({1.0, (time - s.from_s) / ramp, (s.to_s - time) / ramp});
      if (v.id == 1) g *= 0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * 4.0 * (time - s.from_s));  // syllables
      mix[i] += g * events[e].level * 3.0 * filter(detail::Gaussian(rng));
    }
  }
  out.audio.sample_rate_hz = opt.sample_rate_hz;
  out.audio.channel_count = 1;
  out.audio.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    out.audio.samples[i] = static_cast<float>(std::clamp(session_gain * mix[i], -1.0, 1.0));
  return out;
}

struct Corpus {
  std::vector<SessionBundle> train;
  std::vector<SessionBundle> test;
};

inline SessionBundle MakeBundle(const SyntheticSession& s, const FeatureConfig& features) {
  SessionBundle b;
  b.session_id = s.truth.session_id;
  b.stream = std::make_shared<const FeatureStream>(ExtractFeatures(s.audio, features));
  b.annotation = s.truth;
  return b;
}

// train_count + test_count sessions; test sessions follow the train ones in
// generator order.
inline Corpus GenerateCorpus(std::uint64_t seed, int train_count, int test_count, const FeatureConfig& features,
                             const SessionOptions& opt = {}, const Difficulty& diff = {}) {
  Corpus c;
  for (int i = 0; i < train_count + test_count; ++i) {
    auto bundle = MakeBundle(GenerateSession(seed, i, opt, diff), features);
    (i < train_count ? c.train : c.test).push_back(std::move(bundle));
  }
  return c;
}

}  // namespace cml::synthetic
