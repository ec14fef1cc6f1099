#include "cdev/signal.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

#include "cdev/error.hpp"

namespace cdev {

double Spectrum::total_power() const {
  double sum = 0.0;
  for (double p : power) sum += p;
  return sum;
}

double Spectrum::weighted_mean() const {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < power.size(); ++i) {
    num += bin_freqs[i] * power[i];
    den += power[i];
  }
  return den > 0.0 ? num / den : 0.0;
}

namespace signal {
namespace {

using cplx = std::complex<double>;

// Bilinear transform of an analog zpk description; returns digital poles
// and zeros. Analog zeros at infinity land on z = -1.
struct DigitalZpk {
  std::vector<cplx> zeros;
  std::vector<cplx> poles;
};

DigitalZpk bilinear(const std::vector<cplx>& zeros, const std::vector<cplx>& poles, double fs) {
  const double fs2 = 2.0 * fs;
  DigitalZpk out;
  for (const auto& z : zeros) out.zeros.push_back((fs2 + z) / (fs2 - z));
  for (const auto& p : poles) out.poles.push_back((fs2 + p) / (fs2 - p));
  while (out.zeros.size() < out.poles.size()) out.zeros.emplace_back(-1.0, 0.0);
  return out;
}

std::vector<cplx> prototype_poles(int order) {
  std::vector<cplx> poles;
  for (int k = 1; k <= order; ++k) {
    const double theta = std::numbers::pi * (2.0 * k + order - 1) / (2.0 * order);
    poles.push_back(std::polar(1.0, theta));
  }
  return poles;
}

// Groups conjugate pole pairs into second-order sections. Zeros are all
// real (+1 or -1); they are interleaved from both ends of the sorted list so
// a band-pass section receives one of each.
SosFilter to_sos(const DigitalZpk& zpk) {
  std::vector<cplx> complex_poles;
  std::vector<double> real_poles;
  for (const auto& p : zpk.poles) {
    if (std::abs(p.imag()) <= 1e-12 * std::max(1.0, std::abs(p))) {
      real_poles.push_back(p.real());
    } else if (p.imag() > 0.0) {
      complex_poles.push_back(p);
    }
  }
  std::sort(real_poles.begin(), real_poles.end());

  std::vector<double> sorted;
  for (const auto& z : zpk.zeros) sorted.push_back(z.real());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> zeros;
  for (std::size_t lo = 0, hi = sorted.size(); lo < hi;) {
    zeros.push_back(sorted[lo++]);
    if (lo < hi) zeros.push_back(sorted[--hi]);
  }

  std::size_t zi = 0;
  auto take_zeros = [&](Biquad& bq, std::size_t count) {
    if (count == 2 && zi + 1 < zeros.size()) {
      const double z1 = zeros[zi];
      const double z2 = zeros[zi + 1];
      zi += 2;
      bq.b = {1.0, -(z1 + z2), z1 * z2};
    } else if (zi < zeros.size()) {
      bq.b = {1.0, -zeros[zi], 0.0};
      ++zi;
    }
  };

  SosFilter sos;
  for (const auto& p : complex_poles) {
    Biquad bq;
    bq.a = {1.0, -2.0 * p.real(), std::norm(p)};
    take_zeros(bq, 2);
    sos.push_back(bq);
  }
  for (std::size_t i = 0; i < real_poles.size(); i += 2) {
    Biquad bq;
    if (i + 1 < real_poles.size()) {
      const double p1 = real_poles[i];
      const double p2 = real_poles[i + 1];
      bq.a = {1.0, -(p1 + p2), p1 * p2};
      take_zeros(bq, 2);
    } else {
      bq.a = {1.0, -real_poles[i], 0.0};
      take_zeros(bq, 1);
    }
    sos.push_back(bq);
  }
  return sos;
}

cplx response_at(const SosFilter& sos, double omega) {
  const cplx z1 = std::polar(1.0, -omega);
  const cplx z2 = z1 * z1;
  cplx h{1.0, 0.0};
  for (const auto& s : sos) {
    h *= (s.b[0] + s.b[1] * z1 + s.b[2] * z2) / (s.a[0] + s.a[1] * z1 + s.a[2] * z2);
  }
  return h;
}

void normalize_gain(SosFilter& sos, double omega) {
  const double g = std::abs(response_at(sos, omega));
  for (double& b : sos.front().b) b /= g;
}

void check_finite(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) throw DataError("signal contains non-finite samples");
  }
}

// In-place DF-II-T pass with the given initial state per section. All
// sections advance per sample so their recursions overlap.
void sos_pass(const SosFilter& sos, std::vector<double>& x,
              std::vector<std::array<double, 2>> state) {
  const std::size_t ns = sos.size();
  for (double& v : x) {
    double in = v;
    for (std::size_t s = 0; s < ns; ++s) {
      const auto& [b, a] = sos[s];
      auto& z = state[s];
      const double y = b[0] * in + z[0];
      z[0] = b[1] * in - a[1] * y + z[1];
      z[1] = b[2] * in - a[2] * y;
      in = y;
    }
    v = in;
  }
}

// State each section would hold after an infinitely long constant input
// of `level`.
std::vector<std::array<double, 2>> steady_state(const SosFilter& sos, double level) {
  std::vector<std::array<double, 2>> state;
  double in = level;
  for (const auto& [b, a] : sos) {
    const double gain = (b[0] + b[1] + b[2]) / (a[0] + a[1] + a[2]);
    const double out = gain * in;
    const double z2 = b[2] * in - a[2] * out;
    const double z1 = out - b[0] * in;
    state.push_back({z1, z2});
    in = out;
  }
  return state;
}

struct FftPlanCache {
  std::mutex mutex;
  std::map<std::size_t, fftw_plan> plans;

  fftw_plan get(std::size_t n) {
    std::lock_guard lock(mutex);
    auto it = plans.find(n);
    if (it != plans.end()) return it->second;
    std::vector<double> in(n);
    std::vector<fftw_complex> out(n / 2 + 1);
    fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(), out.data(),
                                          FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans.emplace(n, plan);
    return plan;
  }
};

FftPlanCache& plan_cache() {
  static FftPlanCache cache;
  return cache;
}

std::shared_ptr<const std::vector<double>> cached_hamming(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, std::shared_ptr<const std::vector<double>>> windows;
  std::lock_guard lock(mutex);
  auto& slot = windows[n];
  if (!slot) slot = std::make_shared<const std::vector<double>>(hamming_window(n));
  return slot;
}

}  // namespace

SosFilter design_bandpass(double low_hz, double high_hz, int sample_rate) {
  const double nyquist = sample_rate / 2.0;
  if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist)) {
    throw ConfigError("invalid band [" + std::to_string(low_hz) + ", " + std::to_string(high_hz) +
                      "] Hz for sample rate " + std::to_string(sample_rate));
  }
  const double fs = sample_rate;
  const double w1 = 2.0 * fs * std::tan(std::numbers::pi * low_hz / fs);
  const double w2 = 2.0 * fs * std::tan(std::numbers::pi * high_hz / fs);
  const double w0 = std::sqrt(w1 * w2);
  const double bw = w2 - w1;

  std::vector<cplx> poles;
  for (const auto& p : prototype_poles(kFilterOrder / 2)) {
    const cplx half = p * bw / 2.0;
    const cplx root = std::sqrt(half * half - w0 * w0);
    poles.push_back(half + root);
    poles.push_back(half - root);
  }
  std::vector<cplx> zeros(kFilterOrder / 2, cplx{0.0, 0.0});
  SosFilter sos = to_sos(bilinear(zeros, poles, fs));
  normalize_gain(sos, 2.0 * std::atan(w0 / (2.0 * fs)));
  return sos;
}

SosFilter design_highpass(double cutoff_hz, int sample_rate) {
  if (!(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0)) {
    throw ConfigError("invalid high-pass cutoff " + std::to_string(cutoff_hz) + " Hz");
  }
  const double fs = sample_rate;
  const double wc = 2.0 * fs * std::tan(std::numbers::pi * cutoff_hz / fs);
  std::vector<cplx> poles;
  for (const auto& p : prototype_poles(kFilterOrder)) poles.push_back(wc / p);
  std::vector<cplx> zeros(kFilterOrder, cplx{0.0, 0.0});
  SosFilter sos = to_sos(bilinear(zeros, poles, fs));
  normalize_gain(sos, std::numbers::pi);
  return sos;
}

double magnitude_response(const SosFilter& sos, double freq_hz, int sample_rate) {
  return std::abs(response_at(sos, 2.0 * std::numbers::pi * freq_hz / sample_rate));
}

std::vector<double> filtfilt(const SosFilter& sos, std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  const std::size_t pad = std::min<std::size_t>(3 * kFilterOrder, n - 1);

  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  sos_pass(sos, ext, steady_state(sos, ext.front()));
  std::reverse(ext.begin(), ext.end());
  sos_pass(sos, ext, steady_state(sos, ext.front()));
  std::reverse(ext.begin(), ext.end());

  return {ext.begin() + static_cast<std::ptrdiff_t>(pad),
          ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

void require_valid(const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw ConfigError("sample rate must be positive");
  if (clip.samples.empty()) throw DataError("empty audio clip");
  check_finite(clip.samples);
}

AudioClip bandpass_filter(const AudioClip& clip, double low_hz, double high_hz) {
  const auto sos = design_bandpass(low_hz, high_hz, clip.sample_rate);
  require_valid(clip);
  return {filtfilt(sos, clip.samples), clip.sample_rate};
}

AudioClip highpass_filter(const AudioClip& clip, double cutoff_hz) {
  const auto sos = design_highpass(cutoff_hz, clip.sample_rate);
  require_valid(clip);
  return {filtfilt(sos, clip.samples), clip.sample_rate};
}

AudioClip band_limit(const AudioClip& clip, double low_hz, double high_hz) {
  if (high_hz >= clip.sample_rate / 2.0) {
    if (!(low_hz > 0.0 && low_hz < high_hz)) {
      throw ConfigError("invalid band [" + std::to_string(low_hz) + ", " +
                        std::to_string(high_hz) + "] Hz");
    }
    return highpass_filter(clip, low_hz);
  }
  return bandpass_filter(clip, low_hz, high_hz);
}

std::vector<double> envelope(std::span<const double> x, int sample_rate, double window_ms) {
  if (!(window_ms > 0.0)) throw ConfigError("envelope window must be positive");
  const std::size_t n = x.size();
  const auto w = static_cast<std::size_t>(
      std::max(1.0, std::round(window_ms * sample_rate / 1000.0)));
  const std::size_t left = w / 2;
  const std::size_t right = w - 1 - left;
  if (n == 0) return {};

  // van Herk / Gil-Werman: block-wise prefix and suffix maxima over |x|,
  // padded with zeros on both sides so every window is full.
  const std::size_t padded = n + left + right;
  const std::size_t blocks = (padded + w - 1) / w;
  std::vector<double> a(blocks * w, 0.0);
  for (std::size_t i = 0; i < n; ++i) a[i + left] = std::abs(x[i]);
  std::vector<double> prefix(a.size());
  std::vector<double> suffix(a.size());
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * w;
    const std::size_t hi = lo + w - 1;
    prefix[lo] = a[lo];
    for (std::size_t i = lo + 1; i <= hi; ++i) prefix[i] = std::max(prefix[i - 1], a[i]);
    suffix[hi] = a[hi];
    for (std::size_t i = hi; i-- > lo;) suffix[i] = std::max(suffix[i + 1], a[i]);
  }
  std::vector<double> out(n);
  // Output i covers padded positions [i, i + w - 1].
  for (std::size_t i = 0; i < n; ++i) out[i] = std::max(suffix[i], prefix[i + w - 1]);
  return out;
}

std::vector<double> hamming_window(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / denom);
  }
  return w;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

Spectrum periodogram(std::span<const double> x, int sample_rate) {
  if (x.size() < 2) throw DataError("periodogram needs at least 2 samples");
  check_finite(x);
  const std::size_t m = next_pow2(x.size());
  const auto window = cached_hamming(x.size());
  const auto& w = *window;

  std::vector<double> in(m, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) in[i] = x[i] * w[i];
  std::vector<fftw_complex> out(m / 2 + 1);
  fftw_execute_dft_r2c(plan_cache().get(m), in.data(), out.data());

  Spectrum s;
  s.bin_freqs.resize(m / 2 + 1);
  s.power.resize(m / 2 + 1);
  const double df = static_cast<double>(sample_rate) / static_cast<double>(m);
  const double scale = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k <= m / 2; ++k) {
    const double mag2 = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    const bool edge = (k == 0) || (k == m / 2);
    s.bin_freqs[k] = static_cast<double>(k) * df;
    s.power[k] = (edge ? 1.0 : 2.0) * mag2 * scale;
  }
  return s;
}

Spectrum periodogram(const AudioClip& clip) {
  if (clip.samples.empty()) throw DataError("empty audio clip");
  return periodogram(clip.samples, clip.sample_rate);
}

std::vector<Spectrum> spectrogram(const AudioClip& clip, std::size_t frame_len, std::size_t hop) {
  if (hop == 0 || frame_len == 0 || hop > frame_len) {
    throw ConfigError("spectrogram requires 0 < hop <= frame_len");
  }
  if (frame_len > clip.size()) throw DataError("spectrogram frame longer than clip");
  const std::size_t frames = (clip.size() - frame_len) / hop + 1;
  std::vector<Spectrum> out;
  out.reserve(frames);
  const std::span<const double> all(clip.samples);
  for (std::size_t f = 0; f < frames; ++f) {
    out.push_back(periodogram(all.subspan(f * hop, frame_len), clip.sample_rate));
  }
  return out;
}

}  // namespace signal
}  // namespace cdev
