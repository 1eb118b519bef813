// cml/audio.hpp

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
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "cml/error.hpp"

namespace cml {

static_assert(std::endian::native == std::endian::little,
              "binary formats are read and written in host order");

// Mono (after loading) sample buffer. Samples are stored as float so that a
// float32 WAV round trip is exact.
struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate_hz = 0;
  int channel_count = 1;

  std::size_t frame_count() const {
    return channel_count > 0 ? samples.size() / channel_count : 0;
  }
  double duration_s() const {
    return sample_rate_hz > 0 ? static_cast<double>(frame_count()) / sample_rate_hz : 0.0;
  }
};

namespace detail {

template <typename T>
T ReadLe(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

template <typename T>
void AppendLe(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

inline std::vector<std::uint8_t> ReadFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    throw Error(ErrorCode::kIoError, "short read on " + path.string());
  return bytes;
}

inline void WriteFileAtomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoError, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIoError, "short write on " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

// Decodes a RIFF/WAVE image holding PCM16 (format 1) or float32 (format 3)
// samples. Multi-channel input is mixed down to mono by the per-frame mean.
inline AudioBuffer DecodeWav(std::span<const std::uint8_t> bytes) {
  using detail::ReadLe;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw Error(ErrorCode::kUnsupportedFormat, "not a RIFF/WAVE container");
  const std::uint64_t riff_size = ReadLe<std::uint32_t>(bytes, 4);
  if (riff_size + 8 > bytes.size())
    throw Error(ErrorCode::kCorruptHeader, "RIFF size exceeds file length");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::span<const std::uint8_t> data;
  bool have_data = false;

  const std::size_t end = static_cast<std::size_t>(riff_size + 8);
  std::size_t pos = 12;
  while (pos + 8 <= end) {
    const std::uint64_t chunk_size = ReadLe<std::uint32_t>(bytes, pos + 4);
    const std::size_t body = pos + 8;
    if (body + chunk_size > end)
      throw Error(ErrorCode::kCorruptHeader, "chunk extends past end of file");
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw Error(ErrorCode::kCorruptHeader, "fmt chunk too small");
      format = ReadLe<std::uint16_t>(bytes, body);
      channels = ReadLe<std::uint16_t>(bytes, body + 2);
      rate = ReadLe<std::uint32_t>(bytes, body + 4);
      bits = ReadLe<std::uint16_t>(bytes, body + 14);
      if (format == 0xFFFE) {
        if (chunk_size < 40) throw Error(ErrorCode::kCorruptHeader, "extensible fmt chunk too small");
        format = ReadLe<std::uint16_t>(bytes, body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      data = bytes.subspan(body, static_cast<std::size_t>(chunk_size));
      have_data = true;
    }
    pos = body + static_cast<std::size_t>(chunk_size) + (chunk_size & 1);
  }
  if (!have_fmt || !have_data) throw Error(ErrorCode::kCorruptHeader, "missing fmt or data chunk");
  if (channels == 0 || rate == 0) throw Error(ErrorCode::kCorruptHeader, "zero channels or rate");

  const bool pcm16 = format == 1 && bits == 16;
  const bool float32 = format == 3 && bits == 32;
  if (!pcm16 && !float32)
    throw Error(ErrorCode::kUnsupportedFormat,
                "format " + std::to_string(format) + " with " + std::to_string(bits) + " bits");

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  if (data.size() % frame_bytes != 0)
    throw Error(ErrorCode::kCorruptHeader, "data chunk is not a whole number of frames");
  const std::size_t frames = data.size() / frame_bytes;

  AudioBuffer out;
  out.sample_rate_hz = static_cast<int>(rate);
  out.channel_count = 1;
  out.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double sum = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = f * frame_bytes + c * bytes_per_sample;
      double v;
      if (pcm16) {
        v = ReadLe<std::int16_t>(data, off) / 32768.0;
      } else {
        v = ReadLe<float>(data, off);
        if (!std::isfinite(v)) throw Error(ErrorCode::kUnsupportedFormat, "non-finite sample");
      }
      sum += v;
    }
    double mono = channels == 1 ? sum : sum / channels;
    if (mono > 1.0) mono = 1.0;
    if (mono < -1.0) mono = -1.0;
    out.samples[f] = static_cast<float>(mono);
  }
  return out;
}

inline AudioBuffer LoadAudio(const std::filesystem::path& path) {
  const auto bytes = detail::ReadFileBytes(path);
  return DecodeWav(bytes);
}

enum class WavEncoding { kPcm16, kFloat32 };

inline std::vector<std::uint8_t> EncodeWav(const AudioBuffer& audio,
                                           WavEncoding encoding = WavEncoding::kFloat32) {
  using detail::AppendLe;
  const std::uint16_t channels = static_cast<std::uint16_t>(audio.channel_count);
  const std::uint16_t bits = encoding == WavEncoding::kPcm16 ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(audio.samples.size() * (bits / 8));
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  AppendLe<std::uint32_t>(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  AppendLe<std::uint32_t>(out, 16);
  AppendLe<std::uint16_t>(out, encoding == WavEncoding::kPcm16 ? 1 : 3);
  AppendLe<std::uint16_t>(out, channels);
  AppendLe<std::uint32_t>(out, static_cast<std::uint32_t>(audio.sample_rate_hz));
  AppendLe<std::uint32_t>(out, static_cast<std::uint32_t>(audio.sample_rate_hz) * channels * (bits / 8));
  AppendLe<std::uint16_t>(out, static_cast<std::uint16_t>(channels * (bits / 8)));
  AppendLe<std::uint16_t>(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  AppendLe<std::uint32_t>(out, data_bytes);
  for (float s : audio.samples) {
    if (encoding == WavEncoding::kPcm16) {
      const double scaled = std::round(static_cast<double>(s) * 32768.0);
      AppendLe<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0)));
    } else {
      AppendLe<float>(out, s);
    }
  }
  return out;
}

inline void WriteWav(const std::filesystem::path& path, const AudioBuffer& audio,
                     WavEncoding encoding = WavEncoding::kFloat32) {
  detail::WriteFileAtomic(path, EncodeWav(audio, encoding));
}

}  // namespace cml
