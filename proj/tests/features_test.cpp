// tests/features_test.cpp

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

#include <chrono>
#include <fstream>

#include <gtest/gtest.h>

#include "cml/features.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace cml {
namespace {

// Largest per-frame deviation relative to max(1, frame magnitude).
double WorstFrameError(const FeatureStream& got, const oracle::Frames& want) {
  double worst = 0.0;
  for (std::size_t t = 0; t < want.size(); ++t) {
    double scale = 1.0, diff = 0.0;
    for (std::size_t j = 0; j < want[t].size(); ++j) {
      scale = std::max(scale, std::abs(want[t][j]));
      diff = std::max(diff, std::abs(got.frames(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) - want[t][j]));
    }
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

TEST(Mfcc, MatchesBruteForceOracleOnRandomSignals) {
  std::mt19937_64 rng(20240601);
  std::uniform_real_distribution<double> seconds(1.0, 3.0);
  for (int i = 0; i < 100; ++i) {
    const int sr = i % 2 == 0 ? 16000 : 8000;
    const AudioBuffer a = test::RandomSignal(rng, sr, seconds(rng), i);
    const FeatureStream got = ComputeMfccDd(a, FeatureConfig{});
    oracle::MfccSpec spec;
    spec.sample_rate = sr;
    const auto want = oracle::MfccDd(a.samples, spec);
    ASSERT_EQ(got.rows(), static_cast<Eigen::Index>(want.size())) << "signal " << i;
    ASSERT_EQ(got.dim(), 39);
    EXPECT_LE(WorstFrameError(got, want), 1e-6) << "signal " << i << " kind " << i % 4 << " sr " << sr;
  }
}

TEST(Mfcc, OracleAgreesOnToneAndNoiseAt16k) {
  std::mt19937_64 rng(5);
  AudioBuffer tone;
  tone.sample_rate_hz = 16000;
  for (int i = 0; i < 16000; ++i) tone.samples.push_back(static_cast<float>(0.5 * std::sin(2 * std::numbers::pi * 1000 * i / 16000.0)));
  const AudioBuffer noise = test::RandomSignal(rng, 16000, 1.0, 0);
  for (const AudioBuffer* a : std::initializer_list<const AudioBuffer*>{&tone, &noise}) {
    const auto want = oracle::MfccDd(a->samples, {});
    EXPECT_LE(WorstFrameError(ComputeMfccDd(*a, {}), want), 1e-6);
  }
}

TEST(Mfcc, DefaultShape) {
  std::mt19937_64 rng(1);
  const FeatureStream s = ComputeMfccDd(test::RandomSignal(rng, 16000, 1.0, 0), {});
  EXPECT_EQ(s.dim(), 39);
  EXPECT_DOUBLE_EQ(s.frame_step_s, 0.010);
  EXPECT_EQ(s.rows(), 1 + (16000 - 400) / 160);
}

TEST(Mfcc, SilenceGivesIdenticalFramesAndZeroDeltas) {
  AudioBuffer a;
  a.sample_rate_hz = 16000;
  a.samples.assign(8000, 0.0f);
  const FeatureStream s = ComputeMfccDd(a, {});
  for (Eigen::Index t = 1; t < s.rows(); ++t) EXPECT_EQ(s.frames.row(t), s.frames.row(0));
  EXPECT_EQ(s.frames.rightCols(26).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Mfcc, TooShortAudio) {
  AudioBuffer a;
  a.sample_rate_hz = 16000;
  a.samples.assign(399, 0.1f);
  try {
    ComputeMfccDd(a, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kAudioTooShort);
  }
}

TEST(PreEmphasis, Examples) {
  AudioBuffer a;
  a.sample_rate_hz = 8000;
  a.samples = {1.0f, 1.0f, 1.0f};
  const AudioBuffer y = PreEmphasis(a, 0.97);
  EXPECT_FLOAT_EQ(y.samples[0], 1.0f);
  EXPECT_NEAR(y.samples[1], 0.03f, 1e-7);
  EXPECT_NEAR(y.samples[2], 0.03f, 1e-7);
  EXPECT_EQ(PreEmphasis(a, 0.0).samples, a.samples);
  EXPECT_THROW(PreEmphasis(a, 1.0), Error);
}

TEST(TemporalAverage, MeanOfBlocks) {
  FeatureStream s;
  s.frames = RowMatrix::Map(std::vector<double>{1, 3, 5, 7}.data(), 4, 1);
  s.frame_step_s = 0.01;
  const FeatureStream avg = TemporalAverage(s, 4);
  ASSERT_EQ(avg.rows(), 1);
  EXPECT_DOUBLE_EQ(avg.frames(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(avg.frame_step_s, 0.04);
  EXPECT_EQ(TemporalAverage(s, 1).frames, s.frames);
  const FeatureStream partial = TemporalAverage(s, 3);
  ASSERT_EQ(partial.rows(), 2);
  EXPECT_DOUBLE_EQ(partial.frames(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(partial.frames(1, 0), 7.0);
}

TEST(TemporalAverage, RowCountIsCeiling) {
  for (int rows : {1, 4, 5, 99, 100, 101}) {
    FeatureStream s;
    s.frames = RowMatrix::Random(rows, 3);
    for (int g : {1, 2, 4, 7}) EXPECT_EQ(TemporalAverage(s, g).rows(), (rows + g - 1) / g);
  }
}

TEST(StackContext, ShapeAndEdgeReplication) {
  FeatureStream s;
  s.frames = RowMatrix::Map(std::vector<double>{1, 2, 3}.data(), 3, 1);
  const FeatureStream st = StackContext(s, 2);
  ASSERT_EQ(st.rows(), 3);
  ASSERT_EQ(st.dim(), 5);
  EXPECT_EQ(std::vector<double>(st.frames.row(0).begin(), st.frames.row(0).end()), (std::vector<double>{1, 1, 1, 2, 3}));
  EXPECT_EQ(std::vector<double>(st.frames.row(2).begin(), st.frames.row(2).end()), (std::vector<double>{1, 2, 3, 3, 3}));
  EXPECT_EQ(StackContext(s, 0).frames, s.frames);
  FeatureStream wide;
  wide.frames = RowMatrix::Zero(10, 39);
  EXPECT_EQ(StackContext(wide, 3).dim(), 273);
  EXPECT_EQ(StackContext(wide, 5).dim(), 429);
  EXPECT_EQ(StackContext(wide, 5).rows(), 10);
}

TEST(Pipeline, DefaultsGive40msAnd429) {
  std::mt19937_64 rng(9);
  const FeatureStream s = ExtractFeatures(test::RandomSignal(rng, 16000, 2.0, 2), {});
  EXPECT_EQ(s.dim(), 429);
  EXPECT_DOUBLE_EQ(s.frame_step_s, 0.040);
  FeatureConfig three;
  three.context_n = 3;
  EXPECT_EQ(ExtractFeatures(test::RandomSignal(rng, 16000, 2.0, 2), three).dim(), 273);
}

TEST(Pipeline, Deterministic) {
  std::mt19937_64 rng(11);
  const AudioBuffer a = test::RandomSignal(rng, 16000, 1.5, 0);
  EXPECT_EQ(ExtractFeatures(a, {}).frames, ExtractFeatures(a, {}).frames);
}

TEST(Pipeline, SixtySecondsAt48kIs1500Rows) {
  std::mt19937_64 rng(2);
  const AudioBuffer a = test::RandomSignal(rng, 48000, 60.0, 0);
  const auto t0 = std::chrono::steady_clock::now();
  const FeatureStream s = ExtractFeatures(a, {});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(s.rows(), 1500);
  // Soft budget; reported, not enforced.
  std::printf("[ info ] 60 s of 48 kHz audio extracted in %.2f s\n", secs);
}

TEST(Cache, SecondCallHitsAndMatches) {
  test::TempDir dir;
  std::mt19937_64 rng(4);
  WriteWav(dir / "s.wav", test::RandomSignal(rng, 16000, 1.0, 1));
  bool hit = true;
  const FeatureStream a = ExtractSessionFeatures(dir / "s.wav", {}, dir / "cache", &hit);
  EXPECT_FALSE(hit);
  const FeatureStream b = ExtractSessionFeatures(dir / "s.wav", {}, dir / "cache", &hit);
  EXPECT_TRUE(hit);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.frame_step_s, b.frame_step_s);

  FeatureConfig other;
  other.context_n = 2;
  const FeatureStream c = ExtractSessionFeatures(dir / "s.wav", other, dir / "cache", &hit);
  EXPECT_FALSE(hit);
  EXPECT_EQ(c.dim(), 39 * 5);
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir / "cache"), std::filesystem::directory_iterator()), 2);
}

TEST(Cache, TruncatedEntryIsCorrupt) {
  test::TempDir dir;
  std::mt19937_64 rng(4);
  WriteWav(dir / "s.wav", test::RandomSignal(rng, 16000, 1.0, 1));
  ExtractSessionFeatures(dir / "s.wav", {}, dir / "cache");
  const auto entry = std::filesystem::directory_iterator(dir / "cache")->path();
  std::filesystem::resize_file(entry, std::filesystem::file_size(entry) - 4);
  try {
    ExtractSessionFeatures(dir / "s.wav", {}, dir / "cache");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCacheCorrupt);
  }
}

TEST(FeatureFile, RoundTripAndHeader) {
  test::TempDir dir;
  FeatureStream s;
  s.frames = RowMatrix::Random(7, 5).cast<float>().cast<double>();
  s.frame_step_s = 0.04;
  s.start_time_s = 1.5;
  WriteFeatureStream(dir / "f.cmlf", s);
  const FeatureStream r = ReadFeatureStream(dir / "f.cmlf");
  EXPECT_EQ(r.frames, s.frames);
  EXPECT_EQ(r.frame_step_s, 0.04);
  EXPECT_EQ(r.start_time_s, 1.5);
  EXPECT_EQ(std::filesystem::file_size(dir / "f.cmlf"), 36u + 7 * 5 * 4);
  std::ifstream in(dir / "f.cmlf", std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "CMLF");
}

TEST(FeatureConfig, Validation) {
  FeatureConfig c;
  c.step_s = 0.05;
  EXPECT_THROW(c.Validate(), Error);
  c = {};
  c.num_ceps = 30;
  EXPECT_THROW(c.Validate(), Error);
  c = {};
  c.average_group = 0;
  EXPECT_THROW(c.Validate(), Error);
}

}  // namespace
}  // namespace cml
