#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace cdev {

/// Mono sample buffer. Amplitudes are nominally in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 32000;

  [[nodiscard]] std::size_t size() const { return samples.size(); }
  [[nodiscard]] double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

/// One-sided power spectrum on a uniform grid from 0 Hz to Nyquist.
struct Spectrum {
  std::vector<double> bin_freqs;
  std::vector<double> power;

  [[nodiscard]] std::size_t size() const { return power.size(); }
  [[nodiscard]] double bin_width() const {
    return bin_freqs.size() > 1 ? bin_freqs[1] - bin_freqs[0] : 0.0;
  }
  [[nodiscard]] double total_power() const;
  /// Power-weighted mean frequency; 0 if the spectrum carries no power.
  [[nodiscard]] double weighted_mean() const;
};

namespace signal {

/// Total pole count of every Butterworth design produced here. Applied
/// forward-backward, the effective order doubles.
inline constexpr int kFilterOrder = 4;

/// Direct-form II transposed biquad: b0 b1 b2 / 1 a1 a2.
struct Biquad {
  std::array<double, 3> b{1.0, 0.0, 0.0};
  std::array<double, 3> a{1.0, 0.0, 0.0};
};

using SosFilter = std::vector<Biquad>;

/// Digital Butterworth band-pass (bilinear transform, pre-warped edges),
/// normalized to unit gain at the geometric centre frequency.
SosFilter design_bandpass(double low_hz, double high_hz, int sample_rate);

/// Digital Butterworth high-pass, unit gain at Nyquist.
SosFilter design_highpass(double cutoff_hz, int sample_rate);

/// |H(e^{j 2 pi f / fs})| of a single (one-directional) pass.
double magnitude_response(const SosFilter& sos, double freq_hz, int sample_rate);

/// Zero-phase application: odd-reflection padding, steady-state initial
/// conditions, forward pass, backward pass, trim.
std::vector<double> filtfilt(const SosFilter& sos, std::span<const double> x);

/// Zero-phase Butterworth band-pass. Requires 0 < low < high < Nyquist.
AudioClip bandpass_filter(const AudioClip& clip, double low_hz, double high_hz);

/// Zero-phase Butterworth high-pass. Requires 0 < cutoff < Nyquist.
AudioClip highpass_filter(const AudioClip& clip, double cutoff_hz);

/// Band-limits to [low, high]. A band whose upper edge reaches Nyquist
/// passes everything above `low_hz`, so a high-pass is used in that case.
AudioClip band_limit(const AudioClip& clip, double low_hz, double high_hz);

/// Centered moving maximum of |x| over `window_ms`. For a window of w
/// samples, output i covers [i - w/2, i + w - 1 - w/2].
std::vector<double> envelope(std::span<const double> x, int sample_rate, double window_ms);

/// Symmetric Hamming window of length n.
std::vector<double> hamming_window(std::size_t n);

/// Smallest power of two >= n.
std::size_t next_pow2(std::size_t n);

/// Hamming-windowed periodogram, zero-padded to the next power of two.
/// Power is scaled so that its sum equals the windowed signal energy.
Spectrum periodogram(std::span<const double> x, int sample_rate);
Spectrum periodogram(const AudioClip& clip);

/// Periodograms of Hamming-windowed frames.
std::vector<Spectrum> spectrogram(const AudioClip& clip, std::size_t frame_len, std::size_t hop);

/// Throws DataError if the clip is empty or holds non-finite samples.
void require_valid(const AudioClip& clip);

}  // namespace signal
}  // namespace cdev
