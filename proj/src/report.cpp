#include "cdev/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "cdev/error.hpp"
#include "cdev/keyvalue.hpp"

namespace cdev {
namespace fs = std::filesystem;

namespace {

constexpr const char* kCurveHeader = "bit,observable,stratum,dose,estimate,n\n";
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f"};

std::string stratum_text(const std::optional<int>& s) { return s ? std::to_string(*s) : "all"; }

std::string opt_text(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

// Fixed-precision coordinate for SVG output.
std::string coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::vector<int> bits_of(std::span<const ObservableRecord> records) {
  std::set<int> bits;
  for (const auto& r : records) bits.insert(r.bit);
  return {bits.begin(), bits.end()};
}

bool is_ici(Observable o) { return o == Observable::kMeanIci || o == Observable::kIciStd; }

}  // namespace

double baseline_for(Observable o, const EstimateOptions& opts) {
  return is_spectral(o) ? opts.baseline_spectral : opts.baseline_clicks;
}

std::string curves_csv(std::span<const EffectCurve> curves) {
  std::string out = kCurveHeader;
  for (const auto& c : curves) {
    for (std::size_t k = 0; k < c.doses.size(); ++k) {
      out += std::to_string(c.bit) + ',' + c.observable + ',' + stratum_text(c.stratum) + ',' +
             format_double(c.doses[k]) + ',' + opt_text(c.estimates[k]) + ',' + std::to_string(c.n[k]) + '\n';
    }
  }
  return out;
}

std::vector<SignScoreRow> sign_score_rows(std::span<const ObservableRecord> records, Observable o,
                                          std::span<const int> bits) {
  std::vector<std::map<int, std::optional<double>>> per_bit;
  std::set<int> strata;
  for (int b : bits) {
    std::map<int, std::optional<double>> thetas;
    for (const auto& [k, grid] : stratify(records, b, o)) {
      if (grid.doses.size() < 2) continue;
      thetas[k] = theta_fs(grid);
      strata.insert(k);
    }
    per_bit.push_back(std::move(thetas));
  }
  std::vector<SignScoreRow> rows;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    SignScoreRow row;
    row.bit = bits[i];
    row.observable = std::string(observable_name(o));
    for (int k : strata) {
      row.strata.push_back(k);
      auto it = per_bit[i].find(k);
      row.thetas.push_back(it == per_bit[i].end() ? std::nullopt : it->second);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string curves_svg(std::span<const EffectCurve> curves, const std::string& title) {
  constexpr double kW = 800.0;
  constexpr double kH = 500.0;
  constexpr double kLeft = 70.0;
  constexpr double kRight = 130.0;
  constexpr double kTop = 40.0;
  constexpr double kBottom = 50.0;

  double x0 = -1.0;
  double x1 = 1.0;
  double y0 = 0.0;
  double y1 = 0.0;
  bool any = false;
  for (const auto& c : curves) {
    for (std::size_t k = 0; k < c.doses.size(); ++k) {
      x0 = std::min(x0, c.doses[k]);
      x1 = std::max(x1, c.doses[k]);
      if (!c.estimates[k]) continue;
      if (!any) {
        y0 = y1 = *c.estimates[k];
        any = true;
      }
      y0 = std::min(y0, *c.estimates[k]);
      y1 = std::max(y1, *c.estimates[k]);
    }
  }
  if (y1 - y0 < 1e-12) {
    y0 -= 1.0;
    y1 += 1.0;
  }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * (kW - kLeft - kRight); };
  auto sy = [&](double y) { return kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom); };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 500\" width=\"800\" height=\"500\">\n";
  s += "<rect width=\"800\" height=\"500\" fill=\"white\"/>\n";
  s += "<text x=\"400\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + title +
       "</text>\n";
  s += "<rect x=\"" + coord(kLeft) + "\" y=\"" + coord(kTop) + "\" width=\"" + coord(kW - kLeft - kRight) +
       "\" height=\"" + coord(kH - kTop - kBottom) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double v : {-1.0, 1.0}) {
    s += "<line x1=\"" + coord(sx(v)) + "\" y1=\"" + coord(kTop) + "\" x2=\"" + coord(sx(v)) + "\" y2=\"" +
         coord(kH - kBottom) + "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
  }
  if (y0 < 0.0 && y1 > 0.0) {
    s += "<line x1=\"" + coord(kLeft) + "\" y1=\"" + coord(sy(0.0)) + "\" x2=\"" + coord(kW - kRight) +
         "\" y2=\"" + coord(sy(0.0)) + "\" stroke=\"#ccc\"/>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0;
    const double xv = x0 + (x1 - x0) * i / 4.0;
    s += "<text x=\"" + coord(kLeft - 6) + "\" y=\"" + coord(sy(yv) + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + coord(yv) + "</text>\n";
    s += "<text x=\"" + coord(sx(xv)) + "\" y=\"" + coord(kH - kBottom + 16) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + coord(xv) + "</text>\n";
  }
  s += "<text x=\"" + coord(kLeft + (kW - kLeft - kRight) / 2) + "\" y=\"" + coord(kH - 12) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">dose</text>\n";

  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* color = kPalette[i % std::size(kPalette)];
    std::string points;
    auto flush = [&] {
      if (!points.empty()) {
        s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" +
             points + "\"/>\n";
      }
      points.clear();
    };
    for (std::size_t k = 0; k < c.doses.size(); ++k) {
      if (!c.estimates[k]) {
        flush();
        continue;
      }
      if (!points.empty()) points += ' ';
      points += coord(sx(c.doses[k])) + ',' + coord(sy(*c.estimates[k]));
    }
    flush();
    const double ly = kTop + 18.0 * static_cast<double>(i) + 10.0;
    s += "<line x1=\"" + coord(kW - kRight + 12) + "\" y1=\"" + coord(ly) + "\" x2=\"" + coord(kW - kRight + 36) +
         "\" y2=\"" + coord(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + coord(kW - kRight + 42) + "\" y=\"" + coord(ly + 4) +
         "\" font-family=\"sans-serif\" font-size=\"12\">bit " + std::to_string(c.bit) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

EstimateSummary write_estimates(std::span<const ObservableRecord> records, const SpectrumGrid* spectra,
                                const fs::path& out_dir, const EstimateOptions& opts) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  EstimateSummary summary;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out_dir / name, text);
    summary.files.push_back(out_dir / name);
  };

  const auto bits = bits_of(records);
  std::string theta = "bit,observable,stratum,range,theta,n_steps\n";
  auto theta_rows = [&](const EffectCurve& ice, bool curve_slope) {
    const std::pair<const char*, std::optional<double>> ranges[] = {{"all", std::nullopt},
                                                                    {"t>=", opts.theta_dose_min}};
    for (const auto& [label, dose_min] : ranges) {
      std::size_t steps = 0;
      for (std::size_t k = 0; k + (curve_slope ? 1 : 0) < ice.doses.size(); ++k) {
        if (!dose_min || ice.doses[k] >= *dose_min) ++steps;
      }
      std::optional<double> value;
      if (steps > 0) value = curve_slope ? curve_theta(ice, dose_min) : theta_fs(ice, dose_min);
      const std::string range = dose_min ? std::string(label) + format_double(*dose_min) : label;
      theta += std::to_string(ice.bit) + ',' + ice.observable + ',' + stratum_text(ice.stratum) + ',' + range +
               ',' + opt_text(value) + ',' + std::to_string(steps) + '\n';
    }
  };

  for (Observable o : kAllObservables) {
    const std::string name(observable_name(o));
    const double baseline = baseline_for(o, opts);
    std::vector<EffectCurve> ate;
    std::vector<EffectCurve> ice;
    std::vector<EffectCurve> ate_strata;
    std::vector<EffectCurve> ice_strata;
    for (int b : bits) {
      const auto grid = build_grid(records, b, o);
      if (!grid.find_dose(baseline)) {
        throw ConfigError("baseline dose " + format_double(baseline) + " missing for bit " + std::to_string(b));
      }
      ate.push_back(ate_curve(grid, baseline));
      if (grid.doses.size() >= 2) {
        ice.push_back(ice_curve(grid));
        theta_rows(ice.back(), false);
      }
      if (!is_ici(o)) continue;
      for (const auto& [k, sgrid] : stratify(records, b, o)) {
        ate_strata.push_back(ate_curve(sgrid, baseline));
        if (sgrid.doses.size() >= 2) {
          ice_strata.push_back(ice_curve(sgrid));
          theta_rows(ice_strata.back(), false);
        }
      }
    }
    std::vector<EffectCurve> all_ate = ate;
    all_ate.insert(all_ate.end(), ate_strata.begin(), ate_strata.end());
    std::vector<EffectCurve> all_ice = ice;
    all_ice.insert(all_ice.end(), ice_strata.begin(), ice_strata.end());
    emit("ate_" + name + ".csv", curves_csv(all_ate));
    emit("ice_" + name + ".csv", curves_csv(all_ice));
    emit("ate_" + name + ".svg", curves_svg(ate, "ATE of " + name + " (baseline " + format_double(baseline) + ")"));
    emit("ice_" + name + ".svg", curves_svg(ice, "ICE of " + name));

    if (o == Observable::kNClicks) {
      std::vector<EffectCurve> disp;
      for (int b : bits) disp.push_back(dispersion_curve(build_grid(records, b, o), baseline));
      emit("dispersion_nclicks.csv", curves_csv(disp));
      emit("dispersion_nclicks.svg", curves_svg(disp, "Dispersion of n_clicks (baseline " +
                                                          format_double(baseline) + ")"));
    }
  }

  std::string signs = "bit,observable,na_convention,score,strata,na_strata\n";
  for (Observable o : {Observable::kMeanIci, Observable::kIciStd}) {
    for (const auto& row : sign_score_rows(records, o, bits)) {
      std::size_t na = 0;
      for (const auto& t : row.thetas) na += t ? 0 : 1;
      for (auto [label, conv] : {std::pair{"zero", NaConvention::kZero}, std::pair{"minus_one", NaConvention::kMinusOne}}) {
        signs += std::to_string(row.bit) + ',' + row.observable + ',' + label + ',' +
                 std::to_string(sign_score(row.thetas, conv)) + ',' + std::to_string(row.strata.size()) + ',' +
                 std::to_string(na) + '\n';
      }
    }
  }
  emit("sign_scores.csv", signs);

  std::vector<EffectCurve> w1;
  if (spectra && !spectra->empty()) {
    for (int b : bits) {
      w1.push_back(spectral_distance_curve(*spectra, b, opts.baseline_spectral));
      if (w1.back().doses.size() >= 2) theta_rows(w1.back(), true);
    }
    summary.wrote_spectra = true;
  }
  emit("wasserstein.csv", curves_csv(w1));
  if (!w1.empty()) {
    emit("wasserstein.svg", curves_svg(w1, "W1 of average coda spectra (baseline " +
                                               format_double(opts.baseline_spectral) + ")"));
  }
  emit("theta_fs.csv", theta);
  return summary;
}

std::string surrogate_csv(std::span<const ScanResult> scans) {
  std::string out = "bit,observable,stratum,max_leaves,val_mse,treatment_rank,top_feature,consistent_flag\n";
  for (const auto& s : scans) {
    for (const auto& c : s.caps) {
      out += std::to_string(s.bit) + ',' + s.observable + ',' + s.stratum + ',' + std::to_string(c.max_leaves) +
             ',' + format_double(c.val_mse) + ',' + std::to_string(c.treatment_rank) + ',' + c.top_feature + ',' +
             (s.consistent ? "CONSISTENT" : "NOT-CONSISTENT") + '\n';
    }
  }
  return out;
}

std::string surrogate_summary(std::span<const ScanResult> scans, const SurrogateConfig& cfg,
                              std::span<const std::string> notices) {
  std::string out = "learning_rate=" + format_double(cfg.learning_rate) + "\n";
  out += "n_trees_max=" + std::to_string(cfg.n_trees_max) + "\n";
  out += "patience=" + std::to_string(cfg.patience) + "\n";
  out += "validation_fraction=" + format_double(cfg.validation_fraction) + "\n";
  out += "permutation_repeats=" + std::to_string(cfg.permutation_repeats) + "\n";
  out += "min_leaf_rows=" + std::to_string(cfg.min_leaf_rows) + "\n";
  out += "n_bins=" + std::to_string(cfg.n_bins) + "\n";
  out += "mse_tolerance=" + format_double(cfg.mse_tolerance) + "\n";
  out += "min_gain=" + format_double(cfg.min_gain) + "\n";
  out += "seed=" + std::to_string(cfg.seed) + "\n";
  std::string grid;
  for (int l : cfg.max_leaves_grid) grid += (grid.empty() ? "" : ",") + std::to_string(l);
  out += "max_leaves_grid=" + grid + "\n";
  for (const auto& s : scans) {
    out += "verdict." + s.stratum + "=" + (s.consistent ? "CONSISTENT" : "NOT-CONSISTENT") + "\n";
    out += "best_cap." + s.stratum + "=" + std::to_string(s.best_cap) + "\n";
    out += "rows." + s.stratum + "=" + std::to_string(s.rows) + "\n";
    out += "gain." + s.stratum + "=" + format_double(s.gain) + "\n";
  }
  for (const auto& n : notices) out += "# " + n + "\n";
  return out;
}

}  // namespace cdev
