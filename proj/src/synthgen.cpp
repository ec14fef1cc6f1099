#include "cdev/synthgen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "cdev/error.hpp"

namespace cdev {
namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;
constexpr std::size_t kMaxClicks = 64;

enum Stream : std::uint64_t {
  kUnitParams = 1,
  kGaps = 2,
  kCarriers = 3,
  kClickShape = 4,
  kNoise = 5,
};

double relu(double v) { return v > 0.0 ? v : 0.0; }

// Rescales v to zero mean and unit population std. Leaves fewer than two
// values, or constant input, as zeros.
void standardize(std::vector<double>& v) {
  if (v.size() < 2) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size()));
  for (double& x : v) x = sd > 0.0 ? (x - mean) / sd : 0.0;
}

struct EffectSums {
  std::map<Observable, double> target;
  std::map<Observable, double> entangled;
  double noise = 0.0;

  double get_target(Observable o) const {
    auto it = target.find(o);
    return it == target.end() ? 0.0 : it->second;
  }
  double get_entangled(Observable o) const {
    auto it = entangled.find(o);
    return it == entangled.end() ? 0.0 : it->second;
  }
};

EffectSums accumulate(const LatentInput& in, const PlantedEncoding& enc) {
  EffectSums s;
  for (std::size_t b = 0; b < enc.bits.size(); ++b) {
    const double t = in.t[b];
    const auto& e = enc.bits[b];
    if (e.target) s.target[*e.target] += e.slope * relu(t - 1.0);
    if (e.entangled_target) {
      s.entangled[*e.entangled_target] += e.entangled_amp * std::tanh(std::clamp(t, -1.0, 1.0));
    }
    s.noise += e.noise_coeff * relu(t - 1.0);
  }
  return s;
}

void check_input(const LatentInput& in, const PlantedEncoding& enc) {
  if (in.t.size() != enc.bits.size()) {
    throw ConfigError("treatment vector has " + std::to_string(in.t.size()) +
                      " entries, encoding has " + std::to_string(enc.bits.size()) + " bits");
  }
  for (double v : in.x) {
    if (!std::isfinite(v) || std::abs(v) > 1.0) throw DataError("covariates must lie in [-1, 1]");
  }
  for (double v : in.t) {
    if (!std::isfinite(v)) throw DataError("treatment must be finite");
  }
}

}  // namespace

PlantedEncoding PlantedEncoding::defaults(int n_bits) {
  if (n_bits < 4) throw ConfigError("default encoding needs at least 4 bits");
  PlantedEncoding enc;
  enc.bits.resize(static_cast<std::size_t>(n_bits));
  for (auto& b : enc.bits) b.noise_coeff = 0.001;
  enc.bits[0].target = Observable::kSpectralMean;
  enc.bits[0].slope = 1.0;
  enc.bits[0].entangled_target = Observable::kMeanIci;
  enc.bits[0].entangled_amp = 0.05;

  enc.bits[1].target = Observable::kNClicks;
  enc.bits[1].slope = 0.5;
  enc.bits[1].entangled_target = Observable::kSpectralMean;
  enc.bits[1].entangled_amp = 150.0;

  enc.bits[2].entangled_target = Observable::kSpectralStd;
  enc.bits[2].entangled_amp = 0.15;

  enc.bits[3].target = Observable::kSpectralStd;
  enc.bits[3].slope = -1.0;
  enc.bits[3].entangled_target = Observable::kSpectralMean;
  enc.bits[3].entangled_amp = -120.0;

  for (std::size_t b = 4; b < enc.bits.size(); ++b) {
    enc.bits[b].entangled_target = Observable::kSpectralMean;
    enc.bits[b].entangled_amp = 200.0;
  }
  return enc;
}

std::optional<int> PlantedEncoding::target_bit(Observable o) const {
  for (std::size_t b = 0; b < bits.size(); ++b) {
    if (bits[b].target == o) return static_cast<int>(b);
  }
  return std::nullopt;
}

void PlantedEncoding::validate() const {
  if (bits.empty()) throw ConfigError("planted encoding has no bits");
  std::map<Observable, int> seen;
  for (std::size_t b = 0; b < bits.size(); ++b) {
    const auto& e = bits[b];
    const std::string key = "planted.bit" + std::to_string(b);
    for (auto t : {e.target, e.entangled_target}) {
      if (t == Observable::kCodaSpectralMean) {
        throw ConfigError(key + ": coda_spectral_mean cannot be planted directly");
      }
    }
    if (!std::isfinite(e.slope) || !std::isfinite(e.entangled_amp) || !std::isfinite(e.noise_coeff)) {
      throw ConfigError(key + ": non-finite coefficient");
    }
    if (e.noise_coeff < 0.0) throw ConfigError(key + ".noise_coeff: must be >= 0");
    if (e.target && ++seen[*e.target] > 1) {
      throw ConfigError(key + ".target: observable already targeted by another bit");
    }
  }
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("planted." + key + ": " + why);
  };
  if (sample_rate <= 0) throw ConfigError("sample_rate: must be positive");
  if (clip_len < 2) throw ConfigError("clip_len: must be at least 2");
  if (base_clicks < 1) fail("base_clicks", "must be >= 1");
  if (!(base_ici_s > 0.0)) fail("base_ici_s", "must be positive");
  if (!(min_gap_s > 0.0)) fail("min_gap_s", "must be positive");
  if (!(onset_min_s >= 0.0 && onset_max_s >= onset_min_s)) fail("onset_max_s", "must be >= onset_min_s");
  if (!(decay_s > 0.0)) fail("decay_s", "must be positive");
  if (!(attack_s >= 0.0)) fail("attack_s", "must be >= 0");
  if (!(amp_min > 0.0 && amp_max >= amp_min && amp_max <= 1.0)) fail("amp_max", "need 0 < amp_min <= amp_max <= 1");
  if (!(click_amp_spread >= 0.0 && click_amp_spread < 1.0)) fail("click_amp_spread", "must lie in [0, 1)");
  if (!(carrier_min_hz > 0.0 && carrier_max_hz > carrier_min_hz && carrier_max_hz < sample_rate / 2.0)) {
    fail("carrier_max_hz", "need 0 < carrier_min_hz < carrier_max_hz < Nyquist");
  }
  if (!(noise_base >= 0.0 && noise_max >= noise_base)) fail("noise_max", "must be >= noise_base");
  if (!(jitter_floor >= 0.0)) fail("jitter_floor", "must be >= 0");
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(mix64(seed_ ^ mix64(stream + 0x9e3779b97f4a7c15ULL)));
}

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_covariates(std::span<const double> x) {
  std::uint64_t h = kFnvOffset;
  for (double v : x) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int byte = 0; byte < 8; ++byte) {
      h ^= (bits >> (8 * byte)) & 0xffU;
      h *= kFnvPrime;
    }
  }
  return h;
}

Rng derive_rng(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) throw DataError("covariates must be finite");
  }
  return Rng(hash_covariates(x));
}

PlantedCoda plan_coda(const LatentInput& in, const PlantedEncoding& enc, const GeneratorConfig& cfg) {
  check_input(in, enc);
  const Rng unit = derive_rng(in.x);
  Rng params = unit.fork(kUnitParams);
  params.uniform();  // amplitude, consumed by synth_coda
  const double onset = params.uniform(cfg.onset_min_s, cfg.onset_max_s);
  const double click_offset = params.uniform(-cfg.unit_click_offset, cfg.unit_click_offset);
  const double ici_scale = 1.0 + params.uniform(-cfg.ici_unit_spread, cfg.ici_unit_spread);
  const double carrier_offset = params.uniform(-cfg.carrier_unit_spread_hz, cfg.carrier_unit_spread_hz);

  const EffectSums fx = accumulate(in, enc);
  using O = Observable;

  const double click_drive = fx.get_target(O::kNClicks) + fx.get_entangled(O::kNClicks);
  auto n = static_cast<long>(cfg.base_clicks + std::llround(click_drive + click_offset));
  n = std::clamp<long>(n, 1, static_cast<long>(kMaxClicks));

  // Mean ICI follows the unrounded click drive, so it keeps shrinking with
  // dose inside a fixed click-count stratum.
  const double n_drive = std::max(1.0, cfg.base_clicks + click_drive);
  const double ici_factor =
      std::max(0.3, 1.0 + cfg.ici_step * fx.get_target(O::kMeanIci) + fx.get_entangled(O::kMeanIci));
  const double mean_ici = cfg.base_ici_s * ici_scale * (cfg.base_clicks / n_drive) * ici_factor;
  const double ici_sd =
      mean_ici * cfg.ici_cv *
      std::max(0.05, 1.0 + cfg.ici_std_step * fx.get_target(O::kIciStd) + fx.get_entangled(O::kIciStd));

  Rng gap_rng = unit.fork(kGaps);
  std::vector<double> z_gap(kMaxClicks);
  for (auto& z : z_gap) z = gap_rng.normal();
  Rng car_rng = unit.fork(kCarriers);
  std::vector<double> z_car(kMaxClicks);
  for (auto& z : z_car) z = car_rng.normal();

  const double duration = static_cast<double>(cfg.clip_len) / cfg.sample_rate;
  PlantedCoda plan;
  plan.mean_ici = mean_ici;
  for (;; --n) {
    std::vector<double> z(z_gap.begin(), z_gap.begin() + (n - 1));
    standardize(z);
    plan.onsets.assign(1, onset);
    for (double zk : z) plan.onsets.push_back(plan.onsets.back() + std::max(cfg.min_gap_s, mean_ici + ici_sd * zk));
    if (plan.onsets.back() + cfg.tail_s <= duration || n == 1) break;
    plan.degenerate = true;
  }

  const double carrier = cfg.base_carrier_hz + carrier_offset +
                         cfg.carrier_step_hz * fx.get_target(O::kSpectralMean) +
                         fx.get_entangled(O::kSpectralMean);
  const double jitter =
      cfg.jitter_hz * std::max(cfg.jitter_floor, 1.0 + cfg.jitter_step * fx.get_target(O::kSpectralStd) +
                                                     fx.get_entangled(O::kSpectralStd));
  std::vector<double> zc(z_car.begin(), z_car.begin() + n);
  standardize(zc);
  for (double zk : zc) {
    plan.carriers.push_back(std::clamp(carrier + jitter * zk, cfg.carrier_min_hz, cfg.carrier_max_hz));
  }
  plan.noise_sigma = std::min(cfg.noise_max, cfg.noise_base + fx.noise);
  return plan;
}

void render_click(std::vector<double>& out, int sample_rate, double onset_s, double carrier_hz,
                  double amp, double phase, const GeneratorConfig& cfg) {
  const double fs = sample_rate;
  const auto first = static_cast<long>(std::ceil((onset_s - cfg.attack_s) * fs));
  const auto last = static_cast<long>(std::floor((onset_s + 10.0 * cfg.decay_s) * fs));
  for (long i = std::max(0L, first); i <= last && i < static_cast<long>(out.size()); ++i) {
    const double tau = static_cast<double>(i) / fs - onset_s;
    double env;
    if (tau < 0.0) {
      env = 0.5 * (1.0 - std::cos(std::numbers::pi * (tau + cfg.attack_s) / cfg.attack_s));
    } else {
      env = std::exp(-tau / cfg.decay_s);
    }
    out[static_cast<std::size_t>(i)] +=
        amp * env * std::cos(2.0 * std::numbers::pi * carrier_hz * tau + phase);
  }
}

SynthOutput synth_coda(const LatentInput& in, const PlantedEncoding& enc, const GeneratorConfig& cfg) {
  SynthOutput out;
  out.planted = plan_coda(in, enc, cfg);
  const Rng unit = derive_rng(in.x);
  Rng params = unit.fork(kUnitParams);
  const double amp = params.uniform(cfg.amp_min, cfg.amp_max);

  Rng shape = unit.fork(kClickShape);
  std::vector<double> rel(kMaxClicks);
  std::vector<double> phase(kMaxClicks);
  for (std::size_t k = 0; k < kMaxClicks; ++k) {
    rel[k] = 1.0 - cfg.click_amp_spread * shape.uniform();
    phase[k] = 2.0 * std::numbers::pi * shape.uniform();
  }

  out.clip.sample_rate = cfg.sample_rate;
  out.clip.samples.assign(cfg.clip_len, 0.0);
  for (std::size_t k = 0; k < out.planted.onsets.size(); ++k) {
    render_click(out.clip.samples, cfg.sample_rate, out.planted.onsets[k], out.planted.carriers[k],
                 amp * rel[k], phase[k], cfg);
  }

  // Uniform white noise with the planted standard deviation.
  Rng noise = unit.fork(kNoise);
  const double half_width = std::sqrt(3.0) * out.planted.noise_sigma;
  for (double& v : out.clip.samples) {
    v = std::clamp(v + half_width * (2.0 * noise.uniform() - 1.0), -1.0, 1.0);
  }
  return out;
}

std::vector<std::vector<double>> draw_covariates(std::uint64_t seed, int n_units, int dim) {
  if (n_units <= 0 || dim <= 0) throw ConfigError("n_units and covariate_dim must be positive");
  Rng rng(seed);
  std::vector<std::vector<double>> xs(static_cast<std::size_t>(n_units),
                                      std::vector<double>(static_cast<std::size_t>(dim)));
  for (auto& x : xs) {
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  }
  return xs;
}

}  // namespace cdev
