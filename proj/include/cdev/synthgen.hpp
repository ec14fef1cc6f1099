#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "cdev/observables.hpp"
#include "cdev/signal.hpp"

namespace cdev {

/// Generator input: covariates identify the unit, t holds one dose per bit.
struct LatentInput {
  std::vector<double> x;
  std::vector<double> t;
};

/// Planted effect of one encoding bit.
///
/// The target effect is `slope * max(t - 1, 0)` in target units; the
/// entangled effect is `entangled_amp * tanh(clamp(t, -1, 1))`, which only
/// varies inside the training range and is constant beyond it. Units per
/// observable: n_clicks in clicks, spectral_mean in Hz (target slope is
/// scaled by GeneratorConfig::carrier_step_hz), and relative fractions for
/// mean_ici, ici_std and spectral_std.
struct BitEffect {
  std::optional<Observable> target;
  double slope = 0.0;
  std::optional<Observable> entangled_target;
  double entangled_amp = 0.0;
  double noise_coeff = 0.0;
};

struct PlantedEncoding {
  std::vector<BitEffect> bits;

  /// Bit 1 -> n_clicks, bit 0 -> spectral_mean, bit 3 -> spectral_std, with
  /// cross effects inside the training range for every bit.
  static PlantedEncoding defaults(int n_bits = 5);

  /// Index of the bit whose target is `o`, if any.
  [[nodiscard]] std::optional<int> target_bit(Observable o) const;
  void validate() const;
};

struct GeneratorConfig {
  int sample_rate = 32000;
  std::size_t clip_len = 65536;

  int base_clicks = 5;
  double unit_click_offset = 0.45;  ///< per-unit uniform offset before rounding
  double base_ici_s = 0.2;
  double ici_unit_spread = 0.05;
  double ici_cv = 0.08;             ///< gap std as a fraction of the mean ICI
  double ici_step = 0.04;
  double ici_std_step = 0.075;
  double min_gap_s = 0.06;
  double onset_min_s = 0.15;
  double onset_max_s = 0.30;
  double tail_s = 0.03;

  double base_carrier_hz = 5500.0;
  double carrier_unit_spread_hz = 300.0;
  double carrier_step_hz = 200.0;
  double jitter_hz = 800.0;         ///< per-click carrier std at zero effect
  double jitter_step = 0.075;
  double jitter_floor = 0.05;
  double carrier_min_hz = 3000.0;
  double carrier_max_hz = 14000.0;

  double decay_s = 0.003;
  double attack_s = 0.0003;
  double amp_min = 0.55;
  double amp_max = 0.9;
  double click_amp_spread = 0.25;

  double noise_base = 0.001;
  double noise_max = 0.015;

  void validate() const;
};

/// Deterministic stream: std::mt19937_64 seeded from a 64-bit value, with
/// distribution transforms written out explicitly so draws are identical
/// on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Box-Muller; consumes two draws per call.
  double normal();
  /// Independent child stream identified by `stream`.
  [[nodiscard]] Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z);

/// FNV-1a 64 over the little-endian IEEE-754 bytes of each coordinate.
std::uint64_t hash_covariates(std::span<const double> x);

/// Unit stream: a pure function of the covariates.
Rng derive_rng(std::span<const double> x);

/// Planted targets for one generated coda.
struct PlantedCoda {
  std::vector<double> onsets;
  std::vector<double> carriers;
  double mean_ici = 0.0;
  double noise_sigma = 0.0;
  bool degenerate = false;  ///< n was reduced to fit the clip
};

struct SynthOutput {
  AudioClip clip;
  PlantedCoda planted;
};

/// Plans the coda without rendering audio.
PlantedCoda plan_coda(const LatentInput& in, const PlantedEncoding& enc, const GeneratorConfig& cfg);

SynthOutput synth_coda(const LatentInput& in, const PlantedEncoding& enc, const GeneratorConfig& cfg);

/// Adds one click (raised-cosine attack, exponential decay) peaking at
/// `onset_s`.
void render_click(std::vector<double>& out, int sample_rate, double onset_s, double carrier_hz,
                  double amp, double phase, const GeneratorConfig& cfg);

/// x_i uniform on [-1, 1]^dim for each unit, drawn from `seed` in unit order.
std::vector<std::vector<double>> draw_covariates(std::uint64_t seed, int n_units, int dim);

}  // namespace cdev
