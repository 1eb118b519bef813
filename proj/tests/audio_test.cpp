// tests/audio_test.cpp

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

#include "cml/audio.hpp"
#include "test_support.hpp"

namespace cml {
namespace {

// Hand-built RIFF image with arbitrary format fields.
std::vector<std::uint8_t> RawWav(std::uint16_t format, std::uint16_t channels, std::uint32_t rate,
                                 std::uint16_t bits, const std::vector<std::uint8_t>& payload) {
  using detail::AppendLe;
  std::vector<std::uint8_t> out{'R', 'I', 'F', 'F'};
  AppendLe<std::uint32_t>(out, static_cast<std::uint32_t>(36 + payload.size()));
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  AppendLe<std::uint32_t>(out, 16);
  AppendLe<std::uint16_t>(out, format);
  AppendLe<std::uint16_t>(out, channels);
  AppendLe<std::uint32_t>(out, rate);
  AppendLe<std::uint32_t>(out, rate * channels * bits / 8);
  AppendLe<std::uint16_t>(out, static_cast<std::uint16_t>(channels * bits / 8));
  AppendLe<std::uint16_t>(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  AppendLe<std::uint32_t>(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

TEST(Audio, Pcm16Rescale) {
  std::vector<std::uint8_t> payload;
  for (std::int16_t v : {0, 16384, -32768}) detail::AppendLe<std::int16_t>(payload, v);
  const AudioBuffer a = DecodeWav(RawWav(1, 1, 16000, 16, payload));
  ASSERT_EQ(a.samples.size(), 3u);
  EXPECT_EQ(a.samples[0], 0.0f);
  EXPECT_EQ(a.samples[1], 0.5f);
  EXPECT_EQ(a.samples[2], -1.0f);
  EXPECT_EQ(a.sample_rate_hz, 16000);
  EXPECT_EQ(a.channel_count, 1);
}

TEST(Audio, StereoMixdownIsChannelMean) {
  std::vector<std::uint8_t> payload;
  detail::AppendLe<float>(payload, 0.2f);
  detail::AppendLe<float>(payload, 0.4f);
  const AudioBuffer a = DecodeWav(RawWav(3, 2, 8000, 32, payload));
  ASSERT_EQ(a.samples.size(), 1u);
  EXPECT_NEAR(a.samples[0], 0.3f, 1e-7);
}

TEST(Audio, SampleCountIsRateTimesDuration) {
  AudioBuffer a;
  a.sample_rate_hz = 48000;
  a.samples.assign(48000 * 60, 0.25f);
  const AudioBuffer b = DecodeWav(EncodeWav(a, WavEncoding::kPcm16));
  EXPECT_EQ(b.samples.size(), 2'880'000u);
  EXPECT_DOUBLE_EQ(b.duration_s(), 60.0);
}

TEST(Audio, RoundTripThroughFile) {
  test::TempDir dir;
  std::mt19937_64 rng(3);
  const AudioBuffer a = test::RandomSignal(rng, 16000, 0.5, 0);
  WriteWav(dir / "a.wav", a);
  EXPECT_EQ(LoadAudio(dir / "a.wav").samples, a.samples);
  WriteWav(dir / "b.wav", a, WavEncoding::kPcm16);
  const AudioBuffer b = LoadAudio(dir / "b.wav");
  ASSERT_EQ(b.samples.size(), a.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_NEAR(b.samples[i], a.samples[i], 1.0 / 32768);
}

TEST(Audio, RejectsCompressedFormats) {
  const std::vector<std::uint8_t> payload(16, 0);
  try {
    DecodeWav(RawWav(2, 1, 8000, 4, payload));  // ADPCM
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnsupportedFormat);
  }
  try {
    DecodeWav(std::vector<std::uint8_t>{'O', 'g', 'g', 'S', 0, 0, 0, 0, 0, 0, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnsupportedFormat);
  }
}

TEST(Audio, TruncatedFileIsCorrupt) {
  std::vector<std::uint8_t> payload(400, 0);
  auto bytes = RawWav(1, 1, 8000, 16, payload);
  bytes.resize(bytes.size() - 100);
  try {
    DecodeWav(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCorruptHeader);
  }
}

TEST(Audio, NonFiniteFloatRejected) {
  std::vector<std::uint8_t> payload;
  detail::AppendLe<float>(payload, std::numeric_limits<float>::quiet_NaN());
  EXPECT_THROW(DecodeWav(RawWav(3, 1, 8000, 32, payload)), Error);
}

TEST(Audio, MissingFileIsIoError) {
  try {
    LoadAudio("/nonexistent/x.wav");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIoError);
  }
}

}  // namespace
}  // namespace cml
