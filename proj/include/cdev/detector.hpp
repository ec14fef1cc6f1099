#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cdev/signal.hpp"

namespace cdev {

struct DetectorConfig {
  double band_low_hz = 2000.0;
  double band_high_hz = 16000.0;
  double min_separation_s = 0.040;
  /// Minimum click amplitude relative to the loudest detected peak.
  double rel_threshold = 0.4;
  /// Absolute floor as a multiple of the median envelope.
  double abs_floor_factor = 5.0;
  double envelope_window_ms = 2.0;
  std::size_t max_candidates = 256;
  std::size_t per_group_peaks = 3;

  /// Throws ConfigError naming the first offending field.
  void validate(int sample_rate) const;
};

struct ClickTrain {
  std::vector<double> times;       ///< seconds, strictly increasing
  std::vector<double> amplitudes;  ///< envelope value at each click
  double reference_level = 0.0;    ///< max amplitude over detected clicks

  [[nodiscard]] std::size_t size() const { return times.size(); }
  [[nodiscard]] bool empty() const { return times.empty(); }
};

/// Envelope peak that survived the amplitude thresholds.
struct Peak {
  std::size_t index = 0;
  double amplitude = 0.0;
};

/// Shannon entropy of the normalized inter-click gaps. Zero for fewer than
/// two times. Throws DataError on non-increasing input.
double spacing_entropy(std::span<const double> times);

/// Peaks of `env` above the absolute floor and the relative threshold, in
/// time order. Plateaus report their middle sample.
std::vector<Peak> threshold_peaks(std::span<const double> env, const DetectorConfig& cfg);

/// Every candidate selection considered when resolving min-separation
/// conflicts among `peaks` (time-ordered). Empty when the enumeration cap
/// is exceeded and the greedy fallback applies.
std::vector<std::vector<Peak>> enumerate_candidates(std::span<const Peak> peaks, int sample_rate,
                                                    const DetectorConfig& cfg);

/// Full pipeline on a raw clip: band-limit, envelope, peak picking.
ClickTrain detect_clicks(const AudioClip& clip, const DetectorConfig& cfg);

/// Same, for a clip that has already been band-limited with `cfg`'s band.
ClickTrain detect_clicks_filtered(const AudioClip& filtered, const DetectorConfig& cfg);

}  // namespace cdev
