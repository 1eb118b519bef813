// cml/features.hpp

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

#include <fftw3.h>
#include <openssl/evp.h>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "cml/audio.hpp"
#include "cml/error.hpp"

namespace cml {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureConfig {
  double window_s = 0.025;
  double step_s = 0.010;
  int num_ceps = 13;  // includes c0
  int average_group = 4;
  int context_n = 5;
  double pre_emphasis_coeff = 0.97;
  int mel_filters = 26;
  int fft_size = 0;  // 0 selects the next power of two >= window length
  int delta_window = 2;

  void Validate() const {
    auto bad = [](const std::string& what) { throw Error(ErrorCode::kValidationError, what); };
    if (!(window_s > 0) || !(step_s > 0) || step_s > window_s) bad("need 0 < step_s <= window_s");
    if (average_group < 1) bad("average_group must be >= 1");
    if (context_n < 0) bad("context_n must be >= 0");
    if (!(pre_emphasis_coeff >= 0.0 && pre_emphasis_coeff < 1.0)) bad("pre_emphasis_coeff must be in [0,1)");
    if (num_ceps < 1 || num_ceps > mel_filters) bad("need 1 <= num_ceps <= mel_filters");
    if (delta_window < 1) bad("delta_window must be >= 1");
    if (fft_size != 0 && (fft_size < 2 || (fft_size & (fft_size - 1)) != 0)) bad("fft_size must be a power of two");
  }

  // Stable textual form; feeds the cache key.
  std::string Canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "window_s=" << window_s << ";step_s=" << step_s << ";num_ceps=" << num_ceps
       << ";average_group=" << average_group << ";context_n=" << context_n
       << ";pre_emphasis=" << pre_emphasis_coeff << ";mel_filters=" << mel_filters
       << ";fft_size=" << fft_size << ";delta_window=" << delta_window << ";v=1";
    return os.str();
  }
};

// Uniform-rate feature frames. Frame k covers
// [start_time_s + k * frame_step_s, start_time_s + k * frame_step_s + window).
struct FeatureStream {
  RowMatrix frames;
  double frame_step_s = 0.0;
  double start_time_s = 0.0;

  Eigen::Index rows() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

inline AudioBuffer PreEmphasis(const AudioBuffer& audio, double coeff) {
  if (!(coeff >= 0.0 && coeff < 1.0))
    throw Error(ErrorCode::kValidationError, "pre-emphasis coefficient must be in [0,1)");
  AudioBuffer out = audio;
  const auto& x = audio.samples;
  for (std::size_t t = 1; t < x.size(); ++t)
    out.samples[t] = static_cast<float>(static_cast<double>(x[t]) - coeff * static_cast<double>(x[t - 1]));
  return out;
}

namespace detail {

inline std::mutex& FftwPlannerMutex() {
  static std::mutex m;
  return m;
}

inline int NextPow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

inline double HzToMel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double MelToHz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist, evaluated
// at the FFT bin centre frequencies. Result is mel_filters x (fft_size/2+1).
inline RowMatrix MelFilterbank(int mel_filters, int fft_size, int sample_rate) {
  const int bins = fft_size / 2 + 1;
  const double mel_hi = HzToMel(sample_rate / 2.0);
  std::vector<double> edges(mel_filters + 2);
  for (int i = 0; i < mel_filters + 2; ++i) edges[i] = MelToHz(mel_hi * i / (mel_filters + 1));
  RowMatrix fb = RowMatrix::Zero(mel_filters, bins);
  for (int m = 0; m < mel_filters; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / fft_size;
      if (f > lo && f < mid)
        fb(m, k) = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        fb(m, k) = (hi - f) / (hi - mid);
    }
  }
  return fb;
}

// Orthonormal DCT-II basis, num_ceps x mel_filters.
inline RowMatrix DctBasis(int num_ceps, int mel_filters) {
  RowMatrix basis(num_ceps, mel_filters);
  for (int j = 0; j < num_ceps; ++j) {
    const double scale = std::sqrt((j == 0 ? 1.0 : 2.0) / mel_filters);
    for (int m = 0; m < mel_filters; ++m)
      basis(j, m) = scale * std::cos(std::numbers::pi * j * (m + 0.5) / mel_filters);
  }
  return basis;
}

// Regression deltas over +-window frames with edge replication.
inline RowMatrix Deltas(const RowMatrix& x, int window) {
  const Eigen::Index n = x.rows();
  double denom = 0.0;
  for (int th = 1; th <= window; ++th) denom += th * th;
  denom *= 2.0;
  RowMatrix d = RowMatrix::Zero(n, x.cols());
  for (Eigen::Index t = 0; t < n; ++t) {
    for (int th = 1; th <= window; ++th) {
      const Eigen::Index ahead = std::min<Eigen::Index>(t + th, n - 1);
      const Eigen::Index behind = std::max<Eigen::Index>(t - th, 0);
      d.row(t) += th * (x.row(ahead) - x.row(behind));
    }
  }
  d /= denom;
  return d;
}

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};
struct FftwPlanDeleter {
  void operator()(fftw_plan_s* p) const {
    std::lock_guard lock(FftwPlannerMutex());
    fftw_destroy_plan(p);
  }
};

}  // namespace detail

inline int WindowSamples(const FeatureConfig& config, int sample_rate) {
  return static_cast<int>(std::lround(config.window_s * sample_rate));
}
inline int StepSamples(const FeatureConfig& config, int sample_rate) {
  return static_cast<int>(std::lround(config.step_s * sample_rate));
}

// MFCCs with first and second order deltas: [c_0..c_{K-1}, d, dd] per frame.
inline FeatureStream ComputeMfccDd(const AudioBuffer& audio, const FeatureConfig& config) {
  config.Validate();
  if (audio.channel_count != 1) throw Error(ErrorCode::kValidationError, "audio must be mono");
  const int sr = audio.sample_rate_hz;
  const int win = WindowSamples(config, sr);
  const int step = std::max(1, StepSamples(config, sr));
  const int fft_size = config.fft_size > 0 ? config.fft_size : detail::NextPow2(win);
  if (fft_size < win) throw Error(ErrorCode::kValidationError, "fft_size shorter than the window");
  const auto total = static_cast<Eigen::Index>(audio.samples.size());
  if (win < 2 || total < win)
    throw Error(ErrorCode::kAudioTooShort, "audio shorter than one analysis window");
  const Eigen::Index frames = 1 + (total - win) / step;
  const int bins = fft_size / 2 + 1;

  std::vector<double> window(win);
  for (int i = 0; i < win; ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (win - 1));
  const RowMatrix fb = detail::MelFilterbank(config.mel_filters, fft_size, sr);
  const RowMatrix dct = detail::DctBasis(config.num_ceps, config.mel_filters);

  std::unique_ptr<double, detail::FftwDeleter> in(
      static_cast<double*>(fftw_malloc(sizeof(double) * fft_size)));
  std::unique_ptr<fftw_complex, detail::FftwDeleter> out(
      static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins)));
  std::unique_ptr<fftw_plan_s, detail::FftwPlanDeleter> plan;
  {
    std::lock_guard lock(detail::FftwPlannerMutex());
    plan.reset(fftw_plan_dft_r2c_1d(fft_size, in.get(), out.get(), FFTW_ESTIMATE));
  }

  RowMatrix ceps(frames, config.num_ceps);
  Eigen::VectorXd magnitude(bins);
  for (Eigen::Index f = 0; f < frames; ++f) {
    const float* src = audio.samples.data() + f * step;
    double* buf = in.get();
    for (int i = 0; i < win; ++i) buf[i] = static_cast<double>(src[i]) * window[i];
    std::fill(buf + win, buf + fft_size, 0.0);
    fftw_execute(plan.get());
    for (int k = 0; k < bins; ++k) magnitude[k] = std::hypot(out.get()[k][0], out.get()[k][1]);
    Eigen::VectorXd log_energy = fb * magnitude;
    for (Eigen::Index m = 0; m < log_energy.size(); ++m)
      log_energy[m] = std::log(std::max(log_energy[m], 1e-10));
    ceps.row(f) = (dct * log_energy).transpose();
  }

  const RowMatrix d1 = detail::Deltas(ceps, config.delta_window);
  const RowMatrix d2 = detail::Deltas(d1, config.delta_window);
  FeatureStream stream;
  stream.frames.resize(frames, 3 * config.num_ceps);
  stream.frames << ceps, d1, d2;
  stream.frame_step_s = static_cast<double>(step) / sr;
  stream.start_time_s = 0.0;
  return stream;
}

// Replaces non-overlapping blocks of `group` rows by their mean; a trailing
// partial block is averaged over its actual size.
inline FeatureStream TemporalAverage(const FeatureStream& stream, int group) {
  if (group < 1) throw Error(ErrorCode::kValidationError, "group must be >= 1");
  if (group == 1) return stream;
  const Eigen::Index n = stream.rows();
  const Eigen::Index out_rows = (n + group - 1) / group;
  FeatureStream out;
  out.frames.resize(out_rows, stream.dim());
  for (Eigen::Index b = 0; b < out_rows; ++b) {
    const Eigen::Index first = b * group;
    const Eigen::Index len = std::min<Eigen::Index>(group, n - first);
    out.frames.row(b) = stream.frames.middleRows(first, len).colwise().sum() / static_cast<double>(len);
  }
  out.frame_step_s = stream.frame_step_s * group;
  out.start_time_s = stream.start_time_s;
  return out;
}

// Concatenates each frame with n neighbours on either side, replicating the
// first/last frame at the edges.
inline FeatureStream StackContext(const FeatureStream& stream, int n) {
  if (n < 0) throw Error(ErrorCode::kValidationError, "context must be >= 0");
  if (n == 0) return stream;
  const Eigen::Index rows = stream.rows();
  const Eigen::Index dim = stream.dim();
  FeatureStream out;
  out.frames.resize(rows, dim * (2 * n + 1));
  for (Eigen::Index t = 0; t < rows; ++t) {
    for (int o = -n; o <= n; ++o) {
      const Eigen::Index src = std::clamp<Eigen::Index>(t + o, 0, rows - 1);
      out.frames.block(t, (o + n) * dim, 1, dim) = stream.frames.row(src);
    }
  }
  out.frame_step_s = stream.frame_step_s;
  out.start_time_s = stream.start_time_s;
  return out;
}

// Full pipeline without caching. Values are rounded to float precision so
// that a fresh result and a cache reload are identical.
inline FeatureStream ExtractFeatures(const AudioBuffer& audio, const FeatureConfig& config) {
  config.Validate();
  FeatureStream s = ComputeMfccDd(PreEmphasis(audio, config.pre_emphasis_coeff), config);
  s = TemporalAverage(s, config.average_group);
  s = StackContext(s, config.context_n);
  s.frames = s.frames.cast<float>().cast<double>();
  return s;
}

// --- feature stream file ---------------------------------------------------
//
// Little-endian: magic "CMLF", version u32, dim u32, row_count u64,
// frame_step_s f64, start_time_s f64, then row-major float32 payload.

inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 4 + 4 + 8 + 8 + 8;

inline std::vector<std::uint8_t> EncodeFeatureStream(const FeatureStream& s) {
  using detail::AppendLe;
  std::vector<std::uint8_t> out;
  out.reserve(kFeatureHeaderBytes + static_cast<std::size_t>(s.frames.size()) * 4);
  out.insert(out.end(), {'C', 'M', 'L', 'F'});
  AppendLe<std::uint32_t>(out, kFeatureFileVersion);
  AppendLe<std::uint32_t>(out, static_cast<std::uint32_t>(s.dim()));
  AppendLe<std::uint64_t>(out, static_cast<std::uint64_t>(s.rows()));
  AppendLe<double>(out, s.frame_step_s);
  AppendLe<double>(out, s.start_time_s);
  for (Eigen::Index r = 0; r < s.rows(); ++r)
    for (Eigen::Index c = 0; c < s.dim(); ++c) AppendLe<float>(out, static_cast<float>(s.frames(r, c)));
  return out;
}

inline FeatureStream DecodeFeatureStream(std::span<const std::uint8_t> bytes) {
  using detail::ReadLe;
  if (bytes.size() < kFeatureHeaderBytes || std::memcmp(bytes.data(), "CMLF", 4) != 0)
    throw Error(ErrorCode::kCacheCorrupt, "missing CMLF header");
  if (ReadLe<std::uint32_t>(bytes, 4) != kFeatureFileVersion)
    throw Error(ErrorCode::kCacheCorrupt, "unsupported feature file version");
  const std::uint64_t dim = ReadLe<std::uint32_t>(bytes, 8);
  const std::uint64_t rows = ReadLe<std::uint64_t>(bytes, 12);
  const std::uint64_t payload = bytes.size() - kFeatureHeaderBytes;
  if (dim != 0 && rows > payload / (4 * dim))
    throw Error(ErrorCode::kCacheCorrupt, "header disagrees with payload length");
  if (rows * dim * 4 != payload) throw Error(ErrorCode::kCacheCorrupt, "header disagrees with payload length");
  FeatureStream s;
  s.frame_step_s = ReadLe<double>(bytes, 20);
  s.start_time_s = ReadLe<double>(bytes, 28);
  s.frames.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  std::size_t off = kFeatureHeaderBytes;
  for (Eigen::Index r = 0; r < s.rows(); ++r)
    for (Eigen::Index c = 0; c < s.dim(); ++c, off += 4) s.frames(r, c) = ReadLe<float>(bytes, off);
  return s;
}

inline void WriteFeatureStream(const std::filesystem::path& path, const FeatureStream& s) {
  detail::WriteFileAtomic(path, EncodeFeatureStream(s));
}

inline FeatureStream ReadFeatureStream(const std::filesystem::path& path) {
  return DecodeFeatureStream(detail::ReadFileBytes(path));
}

inline std::string Sha256Hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorCode::kIoError, "sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 15]);
  }
  return hex;
}

inline std::string FeatureCacheKey(std::span<const std::uint8_t> audio_bytes, const FeatureConfig& config) {
  const std::string canon = config.Canonical();
  const auto cfg = Sha256Hex({reinterpret_cast<const std::uint8_t*>(canon.data()), canon.size()});
  return Sha256Hex(audio_bytes).substr(0, 32) + "-" + cfg.substr(0, 16);
}

// Extracts features for one session audio file, consulting and filling the
// cache under cache_dir. Sets *cache_hit when the stream came from disk.
inline FeatureStream ExtractSessionFeatures(const std::filesystem::path& audio_path,
                                            const FeatureConfig& config,
                                            const std::filesystem::path& cache_dir,
                                            bool* cache_hit = nullptr) {
  config.Validate();
  const auto bytes = detail::ReadFileBytes(audio_path);
  const auto entry = cache_dir / (FeatureCacheKey(bytes, config) + ".cmlf");
  if (std::filesystem::exists(entry)) {
    if (cache_hit) *cache_hit = true;
    return ReadFeatureStream(entry);
  }
  if (cache_hit) *cache_hit = false;
  FeatureStream s = ExtractFeatures(DecodeWav(bytes), config);
  std::filesystem::create_directories(cache_dir);
  // Unique temp name per writer; rename publishes atomically.
  auto tmp = entry;
  tmp += "." + std::to_string(::getpid()) + "-" +
         std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + ".part";
  {
    const auto encoded = EncodeFeatureStream(s);
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(encoded.data()), static_cast<std::streamsize>(encoded.size()));
    if (!out) throw Error(ErrorCode::kIoError, "cannot write cache entry " + tmp.string());
  }
  std::filesystem::rename(tmp, entry);
  return s;
}

}  // namespace cml
