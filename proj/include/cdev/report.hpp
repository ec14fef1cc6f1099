#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdev/causal.hpp"
#include "cdev/surrogate.hpp"

namespace cdev {

struct EstimateOptions {
  double baseline_clicks = -1.0;    ///< n_clicks, mean_ici, ici_std
  double baseline_spectral = 1.0;   ///< spectral_mean, spectral_std, coda spectra
  double theta_dose_min = 1.0;      ///< restricted theta rows use t >= this
};

/// Baseline dose for an observable under `opts`.
double baseline_for(Observable o, const EstimateOptions& opts);

/// Effect curves in long form: bit,observable,stratum,dose,estimate,n.
/// Unstratified rows carry stratum "all"; absent estimates are empty.
std::string curves_csv(std::span<const EffectCurve> curves);

struct SignScoreRow {
  int bit = 0;
  std::string observable;
  std::vector<int> strata;                    ///< shared column set
  std::vector<std::optional<double>> thetas;  ///< per stratum, absent = N/A
};

/// Stratified theta per bit on the union of click-count strata.
std::vector<SignScoreRow> sign_score_rows(std::span<const ObservableRecord> records, Observable o,
                                          std::span<const int> bits);

/// Write-only SVG line plot: one polyline per curve, dashed verticals at
/// dose -1 and +1 marking the training range.
std::string curves_svg(std::span<const EffectCurve> curves, const std::string& title);

struct EstimateSummary {
  std::vector<std::filesystem::path> files;
  bool wrote_spectra = false;
};

/// Writes every estimator CSV and plot into `out_dir`. `spectra` may be
/// null, in which case wasserstein.csv only has its header.
EstimateSummary write_estimates(std::span<const ObservableRecord> records, const SpectrumGrid* spectra,
                                const std::filesystem::path& out_dir, const EstimateOptions& opts);

/// Surrogate report CSV: one row per (scan, cap).
std::string surrogate_csv(std::span<const ScanResult> scans);

/// key=value summary: fit settings, verdict per scan, and skip notices.
std::string surrogate_summary(std::span<const ScanResult> scans, const SurrogateConfig& cfg,
                              std::span<const std::string> notices);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace cdev
