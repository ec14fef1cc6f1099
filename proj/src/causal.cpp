#include "cdev/causal.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cdev/error.hpp"
#include "cdev/keyvalue.hpp"

namespace cdev {
namespace {

struct Pair {
  double at = 0.0;
  double ref = 0.0;
};

// Values of units present in both lists (each sorted by unit_id).
std::vector<Pair> paired(const std::vector<UnitValue>& at, const std::vector<UnitValue>& ref) {
  std::vector<Pair> out;
  auto a = at.begin();
  auto r = ref.begin();
  while (a != at.end() && r != ref.end()) {
    if (a->unit_id < r->unit_id) {
      ++a;
    } else if (r->unit_id < a->unit_id) {
      ++r;
    } else {
      out.push_back({a->value, r->value});
      ++a;
      ++r;
    }
  }
  return out;
}

std::optional<double> population_std(const std::vector<UnitValue>& v) {
  if (v.size() < 2) return std::nullopt;
  NeumaierSum s;
  for (const auto& u : v) s.add(u.value);
  const double mean = s.value() / static_cast<double>(v.size());
  NeumaierSum ss;
  for (const auto& u : v) ss.add((u.value - mean) * (u.value - mean));
  return std::sqrt(ss.value() / static_cast<double>(v.size()));
}

std::size_t baseline_index(const OutcomeGrid& grid, double baseline) {
  auto k = grid.find_dose(baseline);
  if (!k) throw ConfigError("baseline dose " + format_double(baseline) + " is not on the dose grid");
  return *k;
}

EffectCurve curve_for(const OutcomeGrid& grid) {
  EffectCurve c;
  c.bit = grid.bit;
  c.observable = std::string(observable_name(grid.observable));
  c.stratum = grid.stratum;
  return c;
}

}  // namespace

void NeumaierSum::add(double v) {
  const double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    comp_ += (sum_ - t) + v;
  } else {
    comp_ += (v - t) + sum_;
  }
  sum_ = t;
}

std::optional<std::size_t> OutcomeGrid::find_dose(double dose) const {
  auto it = std::lower_bound(doses.begin(), doses.end(), dose);
  if (it == doses.end() || *it != dose) return std::nullopt;
  return static_cast<std::size_t>(it - doses.begin());
}

std::vector<double> doses_for_bit(std::span<const ObservableRecord> records, int bit) {
  std::set<double> doses;
  for (const auto& r : records) {
    if (r.bit == bit) doses.insert(r.dose);
  }
  return {doses.begin(), doses.end()};
}

OutcomeGrid build_grid(std::span<const ObservableRecord> records, int bit, Observable observable,
                       std::vector<double> doses) {
  OutcomeGrid g;
  g.bit = bit;
  g.observable = observable;
  g.doses = doses.empty() ? doses_for_bit(records, bit) : std::move(doses);
  for (std::size_t k = 1; k < g.doses.size(); ++k) {
    if (!(g.doses[k] > g.doses[k - 1])) throw DataError("dose grid must be strictly increasing");
  }
  g.values.resize(g.doses.size());
  for (const auto& r : records) {
    if (r.bit != bit) continue;
    const auto v = r.value(observable);
    if (!v) continue;
    if (const auto k = g.find_dose(r.dose)) g.values[*k].push_back({r.unit_id, *v});
  }
  for (auto& list : g.values) {
    std::sort(list.begin(), list.end(),
              [](const UnitValue& a, const UnitValue& b) { return a.unit_id < b.unit_id; });
    for (std::size_t i = 1; i < list.size(); ++i) {
      if (list[i].unit_id == list[i - 1].unit_id) {
        throw DataError("duplicate record for unit " + std::to_string(list[i].unit_id) + " at bit " +
                        std::to_string(bit));
      }
    }
  }
  return g;
}

OutcomeGrid complete_cases(const OutcomeGrid& grid) {
  OutcomeGrid out = grid;
  if (grid.values.empty()) return out;
  std::map<int, std::size_t> seen;
  for (const auto& list : grid.values) {
    for (const auto& u : list) ++seen[u.unit_id];
  }
  for (auto& list : out.values) {
    std::erase_if(list, [&](const UnitValue& u) { return seen[u.unit_id] != grid.values.size(); });
  }
  return out;
}

EffectCurve ate_curve(const OutcomeGrid& grid, double baseline) {
  const std::size_t b = baseline_index(grid, baseline);
  EffectCurve c = curve_for(grid);
  c.baseline = baseline;
  c.doses = grid.doses;
  for (std::size_t k = 0; k < grid.doses.size(); ++k) {
    const auto pairs = paired(grid.values[k], grid.values[b]);
    c.n.push_back(pairs.size());
    if (pairs.empty()) {
      c.estimates.emplace_back();
      c.std_errors.emplace_back();
      continue;
    }
    if (k == b) {
      c.estimates.emplace_back(0.0);
      c.std_errors.emplace_back(0.0);
      continue;
    }
    NeumaierSum at;
    NeumaierSum ref;
    NeumaierSum diff;
    for (const auto& p : pairs) {
      at.add(p.at);
      ref.add(p.ref);
      diff.add(p.at - p.ref);
    }
    const double m = static_cast<double>(pairs.size());
    c.estimates.emplace_back(at.value() / m - ref.value() / m);
    if (pairs.size() < 2) {
      c.std_errors.emplace_back();
      continue;
    }
    const double mean_diff = diff.value() / m;
    NeumaierSum ss;
    for (const auto& p : pairs) {
      const double d = (p.at - p.ref) - mean_diff;
      ss.add(d * d);
    }
    c.std_errors.emplace_back(std::sqrt(ss.value() / (m - 1.0) / m));
  }
  return c;
}

EffectCurve dispersion_curve(const OutcomeGrid& grid, double baseline) {
  const std::size_t b = baseline_index(grid, baseline);
  EffectCurve c = curve_for(grid);
  c.baseline = baseline;
  c.doses = grid.doses;
  const auto ref = population_std(grid.values[b]);
  for (std::size_t k = 0; k < grid.doses.size(); ++k) {
    c.n.push_back(grid.count(k));
    const auto sd = population_std(grid.values[k]);
    if (!sd || !ref) {
      c.estimates.emplace_back();
    } else {
      c.estimates.emplace_back(k == b ? 0.0 : *sd - *ref);
    }
  }
  return c;
}

EffectCurve ice_curve(const OutcomeGrid& grid) {
  if (grid.doses.size() < 2) throw DataError("ICE needs at least two doses");
  EffectCurve c = curve_for(grid);
  for (std::size_t k = 0; k + 1 < grid.doses.size(); ++k) {
    const double dt = grid.doses[k + 1] - grid.doses[k];
    const auto pairs = paired(grid.values[k + 1], grid.values[k]);
    c.doses.push_back(grid.doses[k]);
    c.n.push_back(pairs.size());
    if (pairs.empty()) {
      c.estimates.emplace_back();
      continue;
    }
    NeumaierSum s;
    for (const auto& p : pairs) s.add(p.at - p.ref);
    c.estimates.emplace_back(s.value() / static_cast<double>(pairs.size()) / dt);
  }
  return c;
}

std::optional<double> theta_fs(const EffectCurve& ice, std::optional<double> dose_min) {
  NeumaierSum s;
  std::size_t in_range = 0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < ice.doses.size(); ++k) {
    if (dose_min && ice.doses[k] < *dose_min) continue;
    ++in_range;
    if (!ice.estimates[k]) continue;
    s.add(*ice.estimates[k]);
    ++present;
  }
  if (in_range == 0) throw DataError("no grid steps with left endpoint in the requested range");
  if (present == 0) return std::nullopt;
  return s.value() / static_cast<double>(present);
}

std::optional<double> theta_fs(const OutcomeGrid& grid, std::optional<double> dose_min) {
  return theta_fs(ice_curve(grid), dose_min);
}

std::optional<double> curve_theta(const EffectCurve& curve, std::optional<double> dose_min) {
  NeumaierSum s;
  std::size_t in_range = 0;
  std::size_t present = 0;
  for (std::size_t k = 0; k + 1 < curve.doses.size(); ++k) {
    if (dose_min && curve.doses[k] < *dose_min) continue;
    ++in_range;
    if (!curve.estimates[k] || !curve.estimates[k + 1]) continue;
    s.add((*curve.estimates[k + 1] - *curve.estimates[k]) / (curve.doses[k + 1] - curve.doses[k]));
    ++present;
  }
  if (in_range == 0) throw DataError("no grid steps with left endpoint in the requested range");
  if (present == 0) return std::nullopt;
  return s.value() / static_cast<double>(present);
}

std::map<int, OutcomeGrid> stratify(std::span<const ObservableRecord> records, int bit,
                                    Observable observable) {
  const auto doses = doses_for_bit(records, bit);
  std::map<int, std::vector<ObservableRecord>> by_count;
  for (const auto& r : records) {
    if (r.bit == bit && r.value(observable)) by_count[r.n_clicks].push_back(r);
  }
  std::map<int, OutcomeGrid> strata;
  for (const auto& [k, rs] : by_count) {
    OutcomeGrid g = build_grid(rs, bit, observable, doses);
    g.stratum = k;
    strata.emplace(k, std::move(g));
  }
  return strata;
}

int sign_score(std::span<const std::optional<double>> thetas, NaConvention na) {
  int score = 0;
  for (const auto& t : thetas) {
    if (!t) {
      score += na == NaConvention::kMinusOne ? -1 : 0;
    } else if (*t > 0.0) {
      ++score;
    } else if (*t < 0.0) {
      --score;
    }
  }
  return score;
}

double wasserstein_1d(const Spectrum& p, const Spectrum& q) {
  if (p.size() != q.size() || p.size() < 2) throw DataError("spectra must share a grid of at least two bins");
  const double df = p.bin_width();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (std::abs(p.bin_freqs[i] - q.bin_freqs[i]) > 1e-9 * std::max(1.0, std::abs(p.bin_freqs[i]))) {
      throw DataError("spectra bin grids differ");
    }
  }
  NeumaierSum mass_p;
  NeumaierSum mass_q;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p.power[i] >= 0.0) || !(q.power[i] >= 0.0)) throw DataError("spectra must be nonnegative");
    mass_p.add(p.power[i]);
    mass_q.add(q.power[i]);
  }
  if (std::abs(mass_p.value() - 1.0) > 1e-6 || std::abs(mass_q.value() - 1.0) > 1e-6) {
    throw DataError("spectra must be normalized to unit mass");
  }
  NeumaierSum cdf_p;
  NeumaierSum cdf_q;
  NeumaierSum w;
  // The last bin closes both CDFs at 1 and contributes nothing.
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    cdf_p.add(p.power[i]);
    cdf_q.add(q.power[i]);
    w.add(std::abs(cdf_p.value() - cdf_q.value()));
  }
  return w.value() * df;
}

EffectCurve spectral_distance_curve(const SpectrumGrid& spectra, int bit, double baseline) {
  EffectCurve c;
  c.bit = bit;
  c.observable = "coda_spectrum";
  c.baseline = baseline;
  const auto base = spectra.find({bit, baseline});
  if (base == spectra.end()) {
    throw ConfigError("baseline dose " + format_double(baseline) + " has no spectra for bit " +
                      std::to_string(bit));
  }
  for (const auto& [key, avg] : spectra) {
    if (key.bit != bit) continue;
    c.doses.push_back(key.dose);
    c.n.push_back(static_cast<std::size_t>(avg.n_units));
    if (!avg.spectrum || !base->second.spectrum) {
      c.estimates.emplace_back();
    } else if (key.dose == baseline) {
      c.estimates.emplace_back(0.0);
    } else {
      c.estimates.emplace_back(wasserstein_1d(*avg.spectrum, *base->second.spectrum));
    }
  }
  return c;
}

}  // namespace cdev
