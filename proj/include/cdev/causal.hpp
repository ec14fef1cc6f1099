#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdev/corpus.hpp"
#include "cdev/observables.hpp"
#include "cdev/signal.hpp"

namespace cdev {

/// Compensated (Neumaier) running sum.
class NeumaierSum {
 public:
  void add(double v);
  [[nodiscard]] double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

struct UnitValue {
  int unit_id = 0;
  double value = 0.0;
};

/// Outcomes of one bit and observable, per dose. Units inside a dose are
/// sorted by unit_id; absent values are left out.
struct OutcomeGrid {
  int bit = 0;
  Observable observable = Observable::kNClicks;
  std::optional<int> stratum;
  std::vector<double> doses;
  std::vector<std::vector<UnitValue>> values;

  [[nodiscard]] std::size_t count(std::size_t k) const { return values[k].size(); }
  /// Index of `dose` on the grid, if present.
  [[nodiscard]] std::optional<std::size_t> find_dose(double dose) const;
};

/// Per-dose estimate for one bit. `baseline` is absent for ICE curves,
/// whose entries are indexed by the left endpoint of each grid step.
struct EffectCurve {
  int bit = 0;
  std::string observable;
  std::optional<int> stratum;
  std::optional<double> baseline;
  std::vector<double> doses;
  std::vector<std::optional<double>> estimates;
  std::vector<std::size_t> n;
  /// Standard error of the mean paired difference (ATE curves only).
  std::vector<std::optional<double>> std_errors;
};

/// Doses seen for `bit`, ascending.
std::vector<double> doses_for_bit(std::span<const ObservableRecord> records, int bit);

/// Grid over `doses` (default: doses_for_bit). Throws DataError on a
/// duplicate (unit, dose) pair.
OutcomeGrid build_grid(std::span<const ObservableRecord> records, int bit, Observable observable,
                       std::vector<double> doses = {});

/// Keeps only units observed at every dose.
OutcomeGrid complete_cases(const OutcomeGrid& grid);

/// Difference in means over units observed at both t and the baseline.
/// Doses without paired units get an absent estimate.
EffectCurve ate_curve(const OutcomeGrid& grid, double baseline);

/// Across-unit population std at each dose minus the same at the baseline.
EffectCurve dispersion_curve(const OutcomeGrid& grid, double baseline);

/// Forward-difference incremental effect on each grid step (paired units).
EffectCurve ice_curve(const OutcomeGrid& grid);

/// Mean of the present ICE entries whose left endpoint is >= dose_min.
/// Throws DataError when no step lies in range; absent when every step in
/// range is absent.
std::optional<double> theta_fs(const EffectCurve& ice, std::optional<double> dose_min = std::nullopt);
std::optional<double> theta_fs(const OutcomeGrid& grid, std::optional<double> dose_min = std::nullopt);

/// Mean finite-difference slope of an arbitrary curve over steps whose left
/// endpoint is >= dose_min, skipping steps with an absent end.
std::optional<double> curve_theta(const EffectCurve& curve, std::optional<double> dose_min = std::nullopt);

/// Splits records of one bit by click count. Records whose observable is
/// absent are dropped; every stratum keeps the bit's full dose list.
std::map<int, OutcomeGrid> stratify(std::span<const ObservableRecord> records, int bit,
                                    Observable observable);

enum class NaConvention {
  kZero,          ///< absent strata contribute 0
  kMinusOne,      ///< absent strata contribute -1
};

/// Sum of sign(theta) over strata, with sign(0) = 0.
int sign_score(std::span<const std::optional<double>> thetas, NaConvention na = NaConvention::kZero);

/// W1 between two unit-mass spectra on the same uniform grid:
/// sum_j |CDF_p(j) - CDF_q(j)| * bin_width.
double wasserstein_1d(const Spectrum& p, const Spectrum& q);

/// W1 from each dose's average spectrum to the baseline dose's. Doses with
/// no usable average (or no baseline) are absent.
EffectCurve spectral_distance_curve(const SpectrumGrid& spectra, int bit, double baseline);

}  // namespace cdev
