#include "cdev/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cdev/error.hpp"

namespace cdev {
namespace {

constexpr double kTinyFloor = 1e-12;
constexpr double kEntropyTie = 1e-12;

double median(std::span<const double> v) {
  std::vector<double> tmp(v.begin(), v.end());
  const auto mid = tmp.begin() + static_cast<std::ptrdiff_t>(tmp.size() / 2);
  std::nth_element(tmp.begin(), mid, tmp.end());
  if (tmp.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(tmp.begin(), mid);
  return 0.5 * (lo + hi);
}

bool well_separated(std::span<const Peak> sel, double min_gap_samples) {
  for (std::size_t i = 1; i < sel.size(); ++i) {
    if (static_cast<double>(sel[i].index - sel[i - 1].index) < min_gap_samples) return false;
  }
  return true;
}

std::vector<double> to_times(std::span<const Peak> sel, int sample_rate) {
  std::vector<double> t;
  t.reserve(sel.size());
  for (const auto& p : sel) t.push_back(static_cast<double>(p.index) / sample_rate);
  return t;
}

double total_amplitude(std::span<const Peak> sel) {
  double s = 0.0;
  for (const auto& p : sel) s += p.amplitude;
  return s;
}

// Largest valid subsets drawn from a group's strongest members.
std::vector<std::vector<Peak>> group_alternatives(std::span<const Peak> group,
                                                  double min_gap_samples, std::size_t keep) {
  std::vector<Peak> top(group.begin(), group.end());
  std::stable_sort(top.begin(), top.end(),
                   [](const Peak& a, const Peak& b) { return a.amplitude > b.amplitude; });
  if (top.size() > keep) top.resize(keep);
  std::sort(top.begin(), top.end(),
            [](const Peak& a, const Peak& b) { return a.index < b.index; });

  std::vector<std::vector<Peak>> best;
  std::size_t best_size = 0;
  const std::size_t n = top.size();
  for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
    std::vector<Peak> subset;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::size_t{1} << i)) subset.push_back(top[i]);
    }
    if (!well_separated(subset, min_gap_samples)) continue;
    if (subset.size() > best_size) {
      best.clear();
      best_size = subset.size();
    }
    if (subset.size() == best_size) best.push_back(std::move(subset));
  }
  return best;
}

std::vector<Peak> greedy_by_amplitude(std::span<const Peak> peaks, double min_gap_samples) {
  std::vector<Peak> order(peaks.begin(), peaks.end());
  std::stable_sort(order.begin(), order.end(),
                   [](const Peak& a, const Peak& b) { return a.amplitude > b.amplitude; });
  std::vector<Peak> kept;
  for (const auto& p : order) {
    const bool clear = std::all_of(kept.begin(), kept.end(), [&](const Peak& q) {
      const auto d = p.index > q.index ? p.index - q.index : q.index - p.index;
      return static_cast<double>(d) >= min_gap_samples;
    });
    if (clear) kept.push_back(p);
  }
  std::sort(kept.begin(), kept.end(), [](const Peak& a, const Peak& b) { return a.index < b.index; });
  return kept;
}

// True if `a` should be preferred over `b`.
bool better(std::span<const Peak> a, std::span<const Peak> b, int sample_rate) {
  if (a.size() != b.size()) return a.size() > b.size();
  const double ea = spacing_entropy(to_times(a, sample_rate));
  const double eb = spacing_entropy(to_times(b, sample_rate));
  if (std::abs(ea - eb) > kEntropyTie) return ea > eb;
  const double ta = total_amplitude(a);
  const double tb = total_amplitude(b);
  if (ta != tb) return ta > tb;
  if (a.empty()) return false;
  return a.front().index < b.front().index;
}

ClickTrain to_train(std::span<const Peak> sel, int sample_rate) {
  ClickTrain out;
  for (const auto& p : sel) {
    out.times.push_back(static_cast<double>(p.index) / sample_rate);
    out.amplitudes.push_back(p.amplitude);
    out.reference_level = std::max(out.reference_level, p.amplitude);
  }
  return out;
}

}  // namespace

void DetectorConfig::validate(int sample_rate) const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("detector." + key + ": " + why);
  };
  if (!(band_low_hz > 0.0)) fail("band_low_hz", "must be positive");
  if (!(band_high_hz > band_low_hz)) fail("band_high_hz", "must exceed band_low_hz");
  if (sample_rate > 0 && !(band_low_hz < sample_rate / 2.0)) {
    fail("band_low_hz", "must be below Nyquist");
  }
  if (!(min_separation_s > 0.0)) fail("min_separation_s", "must be positive");
  if (!(rel_threshold > 0.0 && rel_threshold < 1.0)) fail("rel_threshold", "must lie in (0, 1)");
  if (!(abs_floor_factor > 0.0)) fail("abs_floor_factor", "must be positive");
  if (!(envelope_window_ms > 0.0)) fail("envelope_window_ms", "must be positive");
  if (max_candidates == 0) fail("max_candidates", "must be positive");
  if (per_group_peaks == 0 || per_group_peaks > 16) fail("per_group_peaks", "must lie in [1, 16]");
}

double spacing_entropy(std::span<const double> times) {
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) throw DataError("click times must be strictly increasing");
  }
  if (times.size() < 2) return 0.0;
  const double total = times.back() - times.front();
  double h = 0.0;
  for (std::size_t i = 1; i < times.size(); ++i) {
    const double p = (times[i] - times[i - 1]) / total;
    h -= p * std::log(p);
  }
  return h;
}

std::vector<Peak> threshold_peaks(std::span<const double> env, const DetectorConfig& cfg) {
  const std::size_t n = env.size();
  if (n == 0) return {};
  const double floor = std::max(cfg.abs_floor_factor * median(env), kTinyFloor);

  std::vector<Peak> peaks;
  std::size_t i = 0;
  while (i < n) {
    const double left = i == 0 ? -1.0 : env[i - 1];
    if (env[i] > left) {
      std::size_t j = i;
      while (j + 1 < n && env[j + 1] == env[i]) ++j;
      const double right = j + 1 == n ? -1.0 : env[j + 1];
      if (env[i] > right && env[i] > floor) peaks.push_back({(i + j) / 2, env[i]});
      i = j + 1;
    } else {
      ++i;
    }
  }
  if (peaks.empty()) return peaks;

  double ref = 0.0;
  for (const auto& p : peaks) ref = std::max(ref, p.amplitude);
  const double cut = cfg.rel_threshold * ref;
  std::erase_if(peaks, [cut](const Peak& p) { return p.amplitude < cut; });
  return peaks;
}

std::vector<std::vector<Peak>> enumerate_candidates(std::span<const Peak> peaks, int sample_rate,
                                                    const DetectorConfig& cfg) {
  const double min_gap = cfg.min_separation_s * sample_rate;
  std::vector<std::vector<std::vector<Peak>>> alternatives;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= peaks.size(); ++i) {
    const bool split = i == peaks.size() ||
                       static_cast<double>(peaks[i].index - peaks[i - 1].index) >= min_gap;
    if (split) {
      alternatives.push_back(
          group_alternatives(peaks.subspan(start, i - start), min_gap, cfg.per_group_peaks));
      start = i;
    }
  }

  std::size_t total = 1;
  for (const auto& alt : alternatives) {
    total *= alt.size();
    if (total > cfg.max_candidates) return {};
  }

  std::vector<std::vector<Peak>> out(1);
  for (const auto& alt : alternatives) {
    std::vector<std::vector<Peak>> next;
    next.reserve(out.size() * alt.size());
    for (const auto& prefix : out) {
      for (const auto& choice : alt) {
        auto c = prefix;
        c.insert(c.end(), choice.begin(), choice.end());
        next.push_back(std::move(c));
      }
    }
    out = std::move(next);
  }
  return out;
}

ClickTrain detect_clicks_filtered(const AudioClip& filtered, const DetectorConfig& cfg) {
  const auto env = signal::envelope(filtered.samples, filtered.sample_rate, cfg.envelope_window_ms);
  const auto peaks = threshold_peaks(env, cfg);
  if (peaks.empty()) return {};

  const auto candidates = enumerate_candidates(peaks, filtered.sample_rate, cfg);
  if (candidates.empty()) {
    return to_train(greedy_by_amplitude(peaks, cfg.min_separation_s * filtered.sample_rate),
                    filtered.sample_rate);
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < candidates.size(); ++c) {
    if (better(candidates[c], candidates[best], filtered.sample_rate)) best = c;
  }
  return to_train(candidates[best], filtered.sample_rate);
}

ClickTrain detect_clicks(const AudioClip& clip, const DetectorConfig& cfg) {
  cfg.validate(clip.sample_rate);
  signal::require_valid(clip);
  return detect_clicks_filtered(signal::band_limit(clip, cfg.band_low_hz, cfg.band_high_hz), cfg);
}

}  // namespace cdev
