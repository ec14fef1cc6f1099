#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <utility>

#include "cdev/detector.hpp"
#include "cdev/signal.hpp"

namespace cdev {

/// Outcome variables measured per clip.
enum class Observable {
  kNClicks,
  kMeanIci,
  kIciStd,
  kSpectralMean,
  kSpectralStd,
  kCodaSpectralMean,
};

inline constexpr std::array<Observable, 6> kAllObservables{
    Observable::kNClicks,      Observable::kMeanIci,     Observable::kIciStd,
    Observable::kSpectralMean, Observable::kSpectralStd, Observable::kCodaSpectralMean};

/// Short name used in configs and report file names (n_clicks, mean_ici, ...).
std::string_view observable_name(Observable o);
/// Column name in the observables CSV (n_clicks, std_ici, spectral_mean_hz, ...).
std::string_view observable_column(Observable o);
/// Accepts either the short name or the CSV column name.
std::optional<Observable> parse_observable(std::string_view s);
/// Click-timing observables use the -1 baseline; spectral ones use +1.
bool is_spectral(Observable o);

struct ObservablesConfig {
  std::size_t click_window_samples = 512;
  bool keep_spectrum = true;
};

struct MeasureConfig {
  DetectorConfig detector;
  ObservablesConfig observables;
};

struct ObservableRecord {
  int unit_id = 0;
  int bit = 0;
  double dose = 0.0;
  int n_clicks = 0;
  std::optional<double> mean_ici;
  std::optional<double> std_ici;
  std::optional<double> spectral_mean_hz;
  std::optional<double> spectral_mean_std_hz;
  std::optional<double> coda_spectral_mean_hz;
  std::optional<Spectrum> coda_spectrum;

  [[nodiscard]] std::optional<double> value(Observable o) const;
};

struct IciStats {
  double mean = 0.0;
  double std = 0.0;
};

/// Mean and population standard deviation of the inter-click gaps.
std::optional<IciStats> ici_stats(const ClickTrain& train);

struct ClickSpectralStats {
  std::optional<double> mean_hz;
  std::optional<double> std_hz;
};

/// Per-click power-weighted mean frequency from a Hamming periodogram of a
/// window centred on each click, averaged over clicks. `filtered` is the
/// band-limited clip.
ClickSpectralStats click_spectral_stats(const AudioClip& filtered, const ClickTrain& train,
                                        const ObservablesConfig& cfg);

struct CodaSpectralStats {
  std::optional<double> mean_hz;
  std::optional<Spectrum> spectrum;  ///< normalized to unit mass
};

/// Whole-clip weighted mean frequency and normalized spectrum of `filtered`.
CodaSpectralStats coda_spectral_stats(const AudioClip& filtered);

/// Detects clicks and computes every observable for one clip.
ObservableRecord measure(const AudioClip& clip, int unit_id, int bit, double dose,
                         const MeasureConfig& cfg);

}  // namespace cdev
