#include "apbface/signal_audio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "apbface/error.hpp"

namespace apb {

int FeatureConfig::window_samples() const {
  return static_cast<int>(std::lround(window_seconds * sample_rate));
}

int FeatureConfig::hop_length() const { return std::max(1, window_samples() / (n_fft_frames + 1)); }

int FeatureConfig::frame_length() const {
  return std::max(1, window_samples() - (n_fft_frames - 1) * hop_length());
}

int FeatureConfig::fft_size() const {
  int n = 1;
  while (n < frame_length()) n <<= 1;
  return n;
}

std::string FeatureConfig::id() const {
  std::ostringstream os;
  os << "mfcc-sr" << sample_rate << "-w" << window_samples() << "-T" << n_fft_frames << "-C" << n_mfcc << "-M"
     << mel_bands << "-f" << log_floor << (causal ? "-causal" : "");
  return os.str();
}

void FeatureConfig::validate() const {
  if (sample_rate <= 0) throw ConfigError("feature config: sample_rate must be positive");
  if (fps <= 0) throw ConfigError("feature config: fps must be positive");
  if (n_fft_frames <= 0 || n_mfcc <= 0 || mel_bands <= 0) throw ConfigError("feature config: sizes must be positive");
  if (window_samples() < n_fft_frames) throw ConfigError("feature config: window shorter than n_fft_frames");
  if (n_mfcc > mel_bands) throw ConfigError("feature config: n_mfcc exceeds mel_bands");
  if (!(log_floor > 0)) throw ConfigError("feature config: log_floor must be positive");
}

AudioTrack resample(const AudioTrack& track, int target_rate) {
  if (target_rate <= 0) throw ConfigError("resample: target rate must be positive");
  if (track.samples.empty()) throw DataError("empty audio");
  if (track.sample_rate <= 0) throw ConfigError("resample: source rate must be positive");
  if (track.sample_rate == target_rate) return track;

  const auto n_in = track.samples.size();
  const auto n_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_in) * target_rate / track.sample_rate));
  AudioTrack out;
  out.sample_rate = target_rate;
  out.samples.resize(std::max<std::size_t>(n_out, 1));
  const double step = static_cast<double>(track.sample_rate) / target_rate;
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    const double pos = static_cast<double>(i) * step;
    const auto i0 = static_cast<std::size_t>(pos);
    if (i0 + 1 >= n_in) {
      out.samples[i] = track.samples[std::min(i0, n_in - 1)];
      continue;
    }
    const double frac = pos - static_cast<double>(i0);
    out.samples[i] = (1.0 - frac) * track.samples[i0] + frac * track.samples[i0 + 1];
  }
  return out;
}

AudioTrack window_for_frame(const AudioTrack& track, long frame_index, const FeatureConfig& cfg) {
  if (frame_index < 0) throw ConfigError("window_for_frame: negative frame index");
  const int len = cfg.window_samples();
  const long center = std::lround(static_cast<double>(frame_index) / cfg.fps * track.sample_rate);
  const long start = cfg.causal ? center - len : center - len / 2;

  AudioTrack out;
  out.sample_rate = track.sample_rate;
  out.samples.assign(static_cast<std::size_t>(len), 0.0);
  const long n = static_cast<long>(track.samples.size());
  for (long i = 0; i < len; ++i) {
    const long src = start + i;
    if (src >= 0 && src < n) out.samples[static_cast<std::size_t>(i)] = track.samples[static_cast<std::size_t>(src)];
  }
  return out;
}

namespace dsp {

void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ConfigError("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        // Twiddles from the exact angle rather than a running product keep error O(eps log n).
        const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

std::vector<double> hann(int n) {
  std::vector<double> w(static_cast<std::size_t>(n), 1.0);
  if (n <= 1) return w;
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  return w;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_filterbank(int mel_bands, int fft_size, int sample_rate) {
  const int bins = fft_size / 2 + 1;
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(mel_bands) + 2);
  for (int i = 0; i < mel_bands + 2; ++i) edges[i] = mel_to_hz(mel_hi * i / (mel_bands + 1));

  std::vector<double> fb(static_cast<std::size_t>(mel_bands) * bins, 0.0);
  for (int m = 0; m < mel_bands; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / fft_size;
      const double w = std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid));
      fb[std::size_t(m) * bins + k] = std::max(0.0, w);
    }
  }
  return fb;
}

}  // namespace dsp

MfccFeature extract_mfcc(const AudioTrack& window, const FeatureConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(window.samples.size()) != cfg.window_samples()) {
    throw ConfigError("extract_mfcc: window length " + std::to_string(window.samples.size()) + " does not match config (" +
                      std::to_string(cfg.window_samples()) + ")");
  }
  for (double s : window.samples) {
    if (!std::isfinite(s)) throw DataError("non-finite audio");
  }

  const int T = cfg.n_fft_frames, C = cfg.n_mfcc, M = cfg.mel_bands;
  const int hop = cfg.hop_length(), flen = cfg.frame_length(), nfft = cfg.fft_size();
  const int bins = nfft / 2 + 1;

  std::vector<double> emph(window.samples.size());
  for (std::size_t i = 0; i < emph.size(); ++i) {
    emph[i] = window.samples[i] - (i > 0 ? cfg.pre_emphasis * window.samples[i - 1] : 0.0);
  }

  const auto win = dsp::hann(flen);
  const auto fb = dsp::mel_filterbank(M, nfft, cfg.sample_rate);

  MfccFeature out;
  out.frames = T;
  out.coeffs = C;
  out.config_id = cfg.id();
  out.values.assign(std::size_t(T) * C, 0.0);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(nfft));
  std::vector<double> power(static_cast<std::size_t>(bins));
  std::vector<double> logmel(static_cast<std::size_t>(M));
  for (int t = 0; t < T; ++t) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    for (int i = 0; i < flen; ++i) buf[i] = emph[std::size_t(t) * hop + i] * win[i];
    dsp::fft(buf);
    for (int k = 0; k < bins; ++k) power[k] = std::norm(buf[k]);
    for (int m = 0; m < M; ++m) {
      double e = 0.0;
      for (int k = 0; k < bins; ++k) e += fb[std::size_t(m) * bins + k] * power[k];
      logmel[m] = std::log(e + cfg.log_floor);
    }
    // Orthonormal DCT-II.
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int m = 0; m < M; ++m) acc += logmel[m] * std::cos(std::numbers::pi * c * (m + 0.5) / M);
      const double scale = c == 0 ? std::sqrt(1.0 / M) : std::sqrt(2.0 / M);
      out.values[std::size_t(t) * C + c] = acc * scale;
    }
  }
  return out;
}

}  // namespace apb
