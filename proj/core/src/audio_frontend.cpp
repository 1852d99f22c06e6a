#include "m2dclap/audio_frontend.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>

namespace m2dclap::audio {

namespace {

uint32_t read_u32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}
uint16_t read_u16(const unsigned char* p) { return uint16_t(p[0] | (p[1] << 8)); }

void put_u32(std::vector<unsigned char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_u16(std::vector<unsigned char>& b, uint16_t v) {
  b.push_back(static_cast<unsigned char>(v));
  b.push_back(static_cast<unsigned char>(v >> 8));
}

// FFTW plans are created under a lock and cached per size; executing a plan
// on fresh arrays is thread-safe.
fftw_plan r2c_plan(int n) {
  static std::mutex mu;
  static std::map<int, fftw_plan> plans;
  std::lock_guard lock(mu);
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;
  double* in = fftw_alloc_real(static_cast<size_t>(n));
  fftw_complex* out = fftw_alloc_complex(static_cast<size_t>(n / 2 + 1));
  fftw_plan plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE | FFTW_UNALIGNED);
  fftw_free(in);
  fftw_free(out);
  if (plan == nullptr) throw Error("cannot create FFT plan");
  plans.emplace(n, plan);
  return plan;
}

}  // namespace

Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open WAV file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("not a RIFF/WAVE file: " + path.string());
  }

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const unsigned char* data = nullptr;
  size_t data_size = 0;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const uint32_t size = read_u32(chunk + 4);
    const size_t body = pos + 8;
    if (body + size > bytes.size()) throw FormatError("truncated WAV chunk in " + path.string());
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("malformed fmt chunk in " + path.string());
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = size;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt || data == nullptr) throw FormatError("WAV missing fmt or data chunk: " + path.string());
  if (format != 1 || bits != 16) {
    throw FormatError("unsupported encoding (need 16-bit PCM): " + path.string());
  }
  if (channels != 1) throw FormatError("unsupported channel count " + std::to_string(channels));
  if (rate != static_cast<uint32_t>(kSampleRate)) {
    throw FormatError("unsupported sample rate " + std::to_string(rate) + " Hz (need 16000)");
  }

  Waveform w;
  w.sample_rate_hz = kSampleRate;
  w.samples.resize(data_size / 2);
  for (size_t i = 0; i < w.samples.size(); ++i) {
    const auto v = static_cast<int16_t>(read_u16(data + 2 * i));
    w.samples[i] = static_cast<float>(v) / 32768.0f;
  }
  return w;
}

void save_wav(const std::filesystem::path& path, const Waveform& w) {
  std::vector<unsigned char> b;
  const auto data_bytes = static_cast<uint32_t>(w.samples.size() * 2);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  put_u32(b, 36 + data_bytes);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(b, 16);
  put_u16(b, 1);
  put_u16(b, 1);
  put_u32(b, static_cast<uint32_t>(w.sample_rate_hz));
  put_u32(b, static_cast<uint32_t>(w.sample_rate_hz * 2));
  put_u16(b, 2);
  put_u16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  put_u32(b, data_bytes);
  for (float s : w.samples) {
    const double c = std::clamp(static_cast<double>(s), -1.0, 1.0);
    const auto v = static_cast<int16_t>(std::lround(std::clamp(c * 32768.0, -32768.0, 32767.0)));
    put_u16(b, static_cast<uint16_t>(v));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write WAV file: " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Waveform random_crop(const Waveform& w, double duration_s, Rng& rng) {
  if (!(duration_s > 0.0)) throw Error("random_crop: duration must be positive");
  const auto want = static_cast<size_t>(std::llround(duration_s * w.sample_rate_hz));
  Waveform out;
  out.sample_rate_hz = w.sample_rate_hz;
  if (w.samples.size() <= want) {
    out.samples = w.samples;
    out.samples.resize(want, 0.0f);
    return out;
  }
  const size_t offset = static_cast<size_t>(rng.below(w.samples.size() - want + 1));
  out.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                     w.samples.begin() + static_cast<std::ptrdiff_t>(offset + want));
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix mel_filterbank(const MelConfig& cfg) {
  const int n_freq = cfg.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  std::vector<double> edges(static_cast<size_t>(cfg.n_mels) + 2);
  for (size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (cfg.n_mels + 1));
  }
  Matrix fb = Matrix::Zero(cfg.n_mels, n_freq);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < n_freq; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate_hz / cfg.n_fft;
      double v = 0.0;
      if (f > lo && f <= mid) {
        v = (f - lo) / (mid - lo);
      } else if (f > mid && f < hi) {
        v = (hi - f) / (hi - mid);
      }
      fb(m, k) = v;
    }
  }
  return fb;
}

int frame_count(size_t n_samples, const MelConfig& cfg) {
  return 1 + static_cast<int>(n_samples / static_cast<size_t>(cfg.hop_length()));
}

std::vector<double> power_spectrum(std::span<const double> frame, int n) {
  if (n <= 0 || !std::has_single_bit(static_cast<unsigned>(n))) throw Error("FFT size must be a power of two");
  if (frame.size() > static_cast<size_t>(n)) throw Error("FFT frame longer than FFT size");
  std::vector<double> in(static_cast<size_t>(n), 0.0);
  std::copy(frame.begin(), frame.end(), in.begin());
  std::vector<std::complex<double>> out(static_cast<size_t>(n / 2 + 1));
  fftw_execute_dft_r2c(r2c_plan(n), in.data(), reinterpret_cast<fftw_complex*>(out.data()));
  std::vector<double> p(out.size());
  for (size_t k = 0; k < p.size(); ++k) p[k] = std::norm(out[k]);
  return p;
}

Spectrogram logmel(const Waveform& w, const MelConfig& cfg) {
  if (w.samples.empty()) throw Error("logmel: empty waveform");
  if (w.sample_rate_hz != cfg.sample_rate_hz) throw Error("logmel: sample rate mismatch");
  const int win = cfg.win_length();
  const int hop = cfg.hop_length();
  if (win > cfg.n_fft) throw Error("logmel: window longer than FFT size");

  // Periodic Hann window, centred inside the n_fft frame.
  std::vector<double> window(static_cast<size_t>(cfg.n_fft), 0.0);
  const int win_off = (cfg.n_fft - win) / 2;
  for (int i = 0; i < win; ++i) {
    window[static_cast<size_t>(win_off + i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win);
  }

  const Matrix fb = mel_filterbank(cfg);
  const int frames = frame_count(w.samples.size(), cfg);
  const int padded = (frames + cfg.pad_multiple - 1) / cfg.pad_multiple * cfg.pad_multiple;
  const auto n = static_cast<std::ptrdiff_t>(w.samples.size());
  const std::ptrdiff_t half = cfg.n_fft / 2;

  Spectrogram s;
  s.values = Matrix::Constant(cfg.n_mels, padded, cfg.pad_value);
  s.frame_hop_s = cfg.hop_s;
  s.window_s = cfg.window_s;
  s.valid_frames = frames;

  std::vector<double> frame(static_cast<size_t>(cfg.n_fft));
  Vector power(cfg.n_fft / 2 + 1);
  for (int t = 0; t < frames; ++t) {
    // Frame t is centred on sample t*hop; outside the signal counts as zero.
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t) * hop - half;
    for (std::ptrdiff_t i = 0; i < cfg.n_fft; ++i) {
      const std::ptrdiff_t idx = start + i;
      const double x = (idx >= 0 && idx < n) ? static_cast<double>(w.samples[static_cast<size_t>(idx)]) : 0.0;
      frame[static_cast<size_t>(i)] = x * window[static_cast<size_t>(i)];
    }
    const auto p = power_spectrum(frame, cfg.n_fft);
    for (size_t k = 0; k < p.size(); ++k) power[static_cast<Eigen::Index>(k)] = p[k];
    const Vector mel = fb * power;
    for (int m = 0; m < cfg.n_mels; ++m) s.values(m, t) = std::log(mel[m] + cfg.log_floor);
  }
  return s;
}

Spectrogram standardize(const Spectrogram& s, double mean, double std) {
  if (!(std > 0.0)) throw Error("standardize: std must be positive");
  if (s.standardized) throw Error("standardize: spectrogram is already standardized");
  Spectrogram out = s;
  out.values = (s.values.array() - mean) / std;
  out.standardized = true;
  return out;
}

}  // namespace m2dclap::audio
