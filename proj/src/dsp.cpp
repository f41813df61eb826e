// SPDX-License-Identifier: Apache-2.0
#include "xkws/dsp.hpp"

#include "xkws/errors.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>

namespace xkws::dsp {
namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

[[noreturn]] void bad_field(const std::filesystem::path& path, const std::string& field,
                            const std::string& detail) {
  throw FormatError(path.string() + ": " + field + ": " + detail);
}

}  // namespace

Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0) {
    bad_field(path, "RIFF", "missing RIFF header");
  }
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) bad_field(path, "WAVE", "not a WAVE file");

  bool have_fmt = false;
  int sample_rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::size_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      // Tolerate a data chunk whose declared size overruns a truncated file.
      if (std::memcmp(chunk, "data", 4) != 0) bad_field(path, "chunk size", "chunk overruns file");
    }
    const std::size_t available = std::min(size, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (available < 16) bad_field(path, "fmt", "chunk shorter than 16 bytes");
      const std::uint16_t format = read_u16(chunk + 8);
      const std::uint16_t channels = read_u16(chunk + 10);
      sample_rate = static_cast<int>(read_u32(chunk + 12));
      const std::uint16_t bits = read_u16(chunk + 22);
      if (format != 1) bad_field(path, "audio_format", "expected PCM (1), got " + std::to_string(format));
      if (channels != 1) bad_field(path, "channels", "expected 1, got " + std::to_string(channels));
      if (bits != 16) bad_field(path, "bits_per_sample", "expected 16, got " + std::to_string(bits));
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = available;
    }
    pos = body + size + (size & 1);
  }
  if (!have_fmt) bad_field(path, "fmt", "missing fmt chunk");
  if (data == nullptr) bad_field(path, "data", "missing data chunk");

  Waveform wave;
  wave.sample_rate_hz = sample_rate;
  wave.samples.resize(data_size / 2);
  for (std::size_t i = 0; i < wave.samples.size(); ++i) {
    const auto raw = static_cast<std::int16_t>(read_u16(data + 2 * i));
    wave.samples[i] = static_cast<double>(raw) / 32768.0;
  }
  if (wave.samples.empty()) bad_field(path, "data", "no samples");
  return wave;
}

void save_wav(const Waveform& wave, const std::filesystem::path& path) {
  const auto n = static_cast<std::uint32_t>(wave.samples.size());
  std::vector<unsigned char> out;
  out.reserve(44 + 2 * n);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + 2 * n);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate_hz));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate_hz) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, 2 * n);
  for (double s : wave.samples) {
    const double scaled = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
    const auto v = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    put_u16(out, static_cast<std::uint16_t>(v));
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw FormatError(path.string() + ": cannot open for writing");
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError(path.string() + ": write failed");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Tensor mel_filterbank_matrix(std::size_t n_mels, std::size_t n_fft, int sample_rate, double f_min,
                             double f_max) {
  if (!(f_min < f_max)) throw InvalidArgument("mel filterbank: f_min must be below f_max");
  if (f_min < 0.0 || f_max > sample_rate / 2.0) {
    throw InvalidArgument("mel filterbank: band must lie within [0, sample_rate/2]");
  }
  if (n_mels == 0 || n_fft < 2) throw InvalidArgument("mel filterbank: empty shape");
  const std::size_t bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  Tensor fb({n_mels, bins});
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
    double peak = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (f > left && f <= centre) w = (f - left) / (centre - left);
      if (f > centre && f < right) w = (right - f) / (right - centre);
      fb.at(m, k) = w;
      peak = std::max(peak, w);
    }
    if (peak <= 0.0) {
      throw InvalidArgument("mel filterbank: filter " + std::to_string(m) +
                            " covers no FFT bin; use fewer bands or a larger n_fft");
    }
    for (std::size_t k = 0; k < bins; ++k) fb.at(m, k) /= peak;
  }
  return fb;
}

std::size_t frame_count(std::size_t num_samples) {
  if (num_samples < kWindowLength) {
    throw TooShortError("log_mel: " + std::to_string(num_samples) + " samples; need at least " +
                        std::to_string(kWindowLength));
  }
  return 1 + (num_samples - kWindowLength) / kHopLength;
}

MelSpectrogram log_mel(const Waveform& wave) {
  if (wave.sample_rate_hz != kSampleRate) {
    throw InvalidArgument("log_mel: expected 16000 Hz audio, got " + std::to_string(wave.sample_rate_hz));
  }
  const std::size_t frames = frame_count(wave.samples.size());
  static const Tensor filterbank = mel_filterbank_matrix();
  static const std::vector<double> window = [] {
    std::vector<double> w(kWindowLength);
    for (std::size_t i = 0; i < kWindowLength; ++i) {
      w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / kWindowLength);
    }
    return w;
  }();

  constexpr std::size_t bins = kFftSize / 2 + 1;
  Eigen::FFT<double> fft;
  std::vector<double> frame(kFftSize, 0.0);
  std::vector<std::complex<double>> spectrum;
  RowMatrix power(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins));
  for (std::size_t t = 0; t < frames; ++t) {
    const double* src = wave.samples.data() + t * kHopLength;
    for (std::size_t i = 0; i < kWindowLength; ++i) frame[i] = src[i] * window[i];
    fft.fwd(spectrum, frame);
    for (std::size_t k = 0; k < bins; ++k) power(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = std::norm(spectrum[k]);
  }
  MelSpectrogram mel;
  mel.values = Tensor({frames, kNumMels});
  mel.values.mat().noalias() = power * filterbank.mat().transpose();
  mel.values.vec() = (mel.values.vec().array() + kLogFloor).log().matrix();
  return mel;
}

}  // namespace xkws::dsp
