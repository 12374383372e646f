#pragma once

#include <complex>
#include <span>
#include <string>
#include <vector>

namespace apb {

struct AudioTrack {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = 0;          // Hz

  double duration() const { return sample_rate > 0 ? double(samples.size()) / sample_rate : 0.0; }
};

struct FeatureConfig {
  int sample_rate = 44100;
  double window_seconds = 0.2;
  double fps = 25.0;
  int n_mfcc = 20;        // C
  int n_fft_frames = 16;  // T
  int mel_bands = 40;
  double log_floor = 1e-10;
  double pre_emphasis = 0.97;
  bool causal = false;  // window ends at the frame timestamp instead of being centered on it

  int window_samples() const;
  // Hop between consecutive STFT frames and the frame length; frames tile the window exactly.
  int hop_length() const;
  int frame_length() const;
  int fft_size() const;  // next power of two >= frame_length
  std::string id() const;
  void validate() const;

  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

// T x C grid, row-major (time outer).
struct MfccFeature {
  int frames = 0;
  int coeffs = 0;
  std::vector<double> values;
  std::string config_id;

  double at(int t, int c) const { return values[std::size_t(t) * coeffs + c]; }
};

AudioTrack resample(const AudioTrack& track, int target_rate);
AudioTrack window_for_frame(const AudioTrack& track, long frame_index, const FeatureConfig& cfg);
MfccFeature extract_mfcc(const AudioTrack& window, const FeatureConfig& cfg);

namespace dsp {

// In-place iterative radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<double>>& a);
std::vector<double> hann(int n);
double hz_to_mel(double hz);
double mel_to_hz(double mel);
// mel_bands x (fft_size/2 + 1) triangular weights, row-major.
std::vector<double> mel_filterbank(int mel_bands, int fft_size, int sample_rate);

}  // namespace dsp

}  // namespace apb
