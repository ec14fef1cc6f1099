#include "cdev/observables.hpp"

#include <algorithm>
#include <cmath>
#include <span>

namespace cdev {

std::string_view observable_name(Observable o) {
  switch (o) {
    case Observable::kNClicks: return "n_clicks";
    case Observable::kMeanIci: return "mean_ici";
    case Observable::kIciStd: return "ici_std";
    case Observable::kSpectralMean: return "spectral_mean";
    case Observable::kSpectralStd: return "spectral_std";
    case Observable::kCodaSpectralMean: return "coda_spectral_mean";
  }
  return "?";
}

std::string_view observable_column(Observable o) {
  switch (o) {
    case Observable::kNClicks: return "n_clicks";
    case Observable::kMeanIci: return "mean_ici";
    case Observable::kIciStd: return "std_ici";
    case Observable::kSpectralMean: return "spectral_mean_hz";
    case Observable::kSpectralStd: return "spectral_mean_std_hz";
    case Observable::kCodaSpectralMean: return "coda_spectral_mean_hz";
  }
  return "?";
}

std::optional<Observable> parse_observable(std::string_view s) {
  for (Observable o : kAllObservables) {
    if (s == observable_name(o) || s == observable_column(o)) return o;
  }
  return std::nullopt;
}

bool is_spectral(Observable o) {
  return o == Observable::kSpectralMean || o == Observable::kSpectralStd ||
         o == Observable::kCodaSpectralMean;
}

std::optional<double> ObservableRecord::value(Observable o) const {
  switch (o) {
    case Observable::kNClicks: return static_cast<double>(n_clicks);
    case Observable::kMeanIci: return mean_ici;
    case Observable::kIciStd: return std_ici;
    case Observable::kSpectralMean: return spectral_mean_hz;
    case Observable::kSpectralStd: return spectral_mean_std_hz;
    case Observable::kCodaSpectralMean: return coda_spectral_mean_hz;
  }
  return std::nullopt;
}

namespace {

// Mean and population std, or nothing for an empty input.
std::optional<IciStats> mean_and_std(std::span<const double> v) {
  if (v.empty()) return std::nullopt;
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return IciStats{mean, std::sqrt(ss / static_cast<double>(v.size()))};
}

}  // namespace

std::optional<IciStats> ici_stats(const ClickTrain& train) {
  if (train.size() < 2) return std::nullopt;
  std::vector<double> gaps;
  for (std::size_t i = 1; i < train.size(); ++i) gaps.push_back(train.times[i] - train.times[i - 1]);
  return mean_and_std(gaps);
}

ClickSpectralStats click_spectral_stats(const AudioClip& filtered, const ClickTrain& train,
                                        const ObservablesConfig& cfg) {
  const std::size_t n = filtered.size();
  const std::size_t win = std::min(cfg.click_window_samples, n);
  std::vector<double> means;
  if (win >= 2) {
    const std::span<const double> all(filtered.samples);
    for (double t : train.times) {
      const auto centre = static_cast<long long>(std::llround(t * filtered.sample_rate));
      long long start = centre - static_cast<long long>(win / 2);
      start = std::clamp<long long>(start, 0, static_cast<long long>(n - win));
      const auto spec = signal::periodogram(all.subspan(static_cast<std::size_t>(start), win),
                                            filtered.sample_rate);
      if (spec.total_power() > 0.0) means.push_back(spec.weighted_mean());
    }
  }
  ClickSpectralStats out;
  if (const auto s = mean_and_std(means)) {
    out.mean_hz = s->mean;
    if (means.size() >= 2) out.std_hz = s->std;
  }
  return out;
}

CodaSpectralStats coda_spectral_stats(const AudioClip& filtered) {
  auto spec = signal::periodogram(filtered);
  const double total = spec.total_power();
  if (!(total > 0.0)) return {};
  CodaSpectralStats out;
  out.mean_hz = spec.weighted_mean();
  for (double& p : spec.power) p /= total;
  out.spectrum = std::move(spec);
  return out;
}

ObservableRecord measure(const AudioClip& clip, int unit_id, int bit, double dose,
                         const MeasureConfig& cfg) {
  cfg.detector.validate(clip.sample_rate);
  signal::require_valid(clip);
  const auto filtered =
      signal::band_limit(clip, cfg.detector.band_low_hz, cfg.detector.band_high_hz);
  const auto train = detect_clicks_filtered(filtered, cfg.detector);

  ObservableRecord r;
  r.unit_id = unit_id;
  r.bit = bit;
  r.dose = dose;
  r.n_clicks = static_cast<int>(train.size());
  if (const auto ici = ici_stats(train)) {
    r.mean_ici = ici->mean;
    r.std_ici = ici->std;
  }
  const auto click = click_spectral_stats(filtered, train, cfg.observables);
  r.spectral_mean_hz = click.mean_hz;
  r.spectral_mean_std_hz = click.std_hz;
  auto coda = coda_spectral_stats(filtered);
  r.coda_spectral_mean_hz = coda.mean_hz;
  if (cfg.observables.keep_spectrum) r.coda_spectrum = std::move(coda.spectrum);
  return r;
}

}  // namespace cdev
