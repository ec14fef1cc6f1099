#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "cdev/signal.hpp"

namespace cdev::testing {

inline AudioClip sine(double freq_hz, double seconds, int fs = 32000, double amp = 1.0,
                      double phase = 0.0) {
  AudioClip c;
  c.sample_rate = fs;
  const auto n = static_cast<std::size_t>(std::llround(seconds * fs));
  c.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.samples[i] = amp * std::sin(2.0 * std::numbers::pi * freq_hz * static_cast<double>(i) / fs + phase);
  }
  return c;
}

inline double rms(const std::vector<double>& x, std::size_t skip = 0) {
  double s = 0.0;
  for (std::size_t i = skip; i + skip < x.size(); ++i) s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(x.size() - 2 * skip));
}

// Gaussian-windowed sinusoid burst peaking at `center_s`.
inline void add_tone_burst(std::vector<double>& x, int fs, double center_s, double carrier_hz,
                           double amp, double width_s = 0.001) {
  const double c = center_s * fs;
  const double w = width_s * fs;
  const auto lo = static_cast<long>(std::max(0.0, c - 6 * w));
  const auto hi = static_cast<long>(std::min<double>(static_cast<double>(x.size()) - 1, c + 6 * w));
  for (long i = lo; i <= hi; ++i) {
    const double d = (static_cast<double>(i) - c);
    x[static_cast<std::size_t>(i)] +=
        amp * std::exp(-0.5 * (d / w) * (d / w)) * std::cos(2.0 * std::numbers::pi * carrier_hz * d / fs);
  }
}

}  // namespace cdev::testing
