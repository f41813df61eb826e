// SPDX-License-Identifier: Apache-2.0
//
// Audio front end: PCM16 WAV I/O and 80-band log-mel features
// (25 ms Hann window, 10 ms hop, 512-point FFT, HTK mel scale).
#pragma once

#include "xkws/tensor.hpp"

#include <filesystem>
#include <vector>

namespace xkws::dsp {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kWindowLength = 400;
inline constexpr std::size_t kHopLength = 160;
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kNumMels = 80;
inline constexpr double kLogFloor = 1e-6;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate_hz = kSampleRate;
};

struct MelSpectrogram {
  std::size_t frames() const { return values.rows(); }
  std::size_t n_mels() const { return values.cols(); }

  Tensor values;  // [frames x 80] natural-log energies
};

// RIFF/WAVE, PCM 16-bit, mono. Samples are scaled by 1/32768.
// Throws FormatError naming the offending field.
Waveform load_wav(const std::filesystem::path& path);
void save_wav(const Waveform& wave, const std::filesystem::path& path);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// [n_mels x (n_fft/2 + 1)] triangular filters, centres equally spaced on the
// HTK mel scale, each row scaled so its largest weight is exactly 1.
Tensor mel_filterbank_matrix(std::size_t n_mels = kNumMels, std::size_t n_fft = kFftSize,
                             int sample_rate = kSampleRate, double f_min = 0.0, double f_max = 8000.0);

// Frames start at sample 0 without centring: 1 + floor((N - 400) / 160).
std::size_t frame_count(std::size_t num_samples);

// ln(mel energy + 1e-6) of the power spectrum. Throws TooShortError for
// fewer than 400 samples and InvalidArgument for a rate other than 16 kHz.
MelSpectrogram log_mel(const Waveform& wave);

}  // namespace xkws::dsp
