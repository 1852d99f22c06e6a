#pragma once

#include "m2dclap/common.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace m2dclap::audio {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<float> samples;
  int sample_rate_hz = kSampleRate;

  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
};

struct MelConfig {
  int sample_rate_hz = kSampleRate;
  int n_mels = 80;
  double fmin_hz = 50.0;
  double fmax_hz = 8000.0;
  double window_s = 0.025;
  double hop_s = 0.010;
  int n_fft = 512;
  double log_floor = 1e-8;
  // Frame count is right-padded to a multiple of this (the patch width).
  int pad_multiple = 16;
  // Padding value, in unstandardized log-mel units. Set to the
  // standardization mean so padded frames become zeros afterwards.
  double pad_value = -7.1;

  int win_length() const { return static_cast<int>(window_s * sample_rate_hz + 0.5); }
  int hop_length() const { return static_cast<int>(hop_s * sample_rate_hz + 0.5); }
};

// Log-mel spectrogram, values(f, t) with F mel bins as rows and T frames.
struct Spectrogram {
  Matrix values;
  double frame_hop_s = 0.010;
  double window_s = 0.025;
  bool standardized = false;
  // Frames computed from audio, before right-padding.
  int valid_frames = 0;

  int bins() const { return static_cast<int>(values.rows()); }
  int frames() const { return static_cast<int>(values.cols()); }
};

Waveform load_wav(const std::filesystem::path& path);
// Writes 16-bit PCM mono. Samples are clipped to [-1, 1].
void save_wav(const std::filesystem::path& path, const Waveform& w);

// Crops `duration_s` seconds at a uniformly drawn offset. Shorter input is
// returned whole, followed by zeros.
Waveform random_crop(const Waveform& w, double duration_s, Rng& rng);

// Triangular HTK-mel filterbank, shape (n_mels, n_fft/2 + 1).
Matrix mel_filterbank(const MelConfig& cfg);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Number of STFT frames before right-padding: 1 + floor(n / hop).
int frame_count(size_t n_samples, const MelConfig& cfg);

Spectrogram logmel(const Waveform& w, const MelConfig& cfg = {});

Spectrogram standardize(const Spectrogram& s, double mean, double std);

// Magnitude-squared spectrum of one real frame via radix-2 FFT. n must be a
// power of two; frame.size() <= n (zero-padded).
std::vector<double> power_spectrum(std::span<const double> frame, int n);

}  // namespace m2dclap::audio
