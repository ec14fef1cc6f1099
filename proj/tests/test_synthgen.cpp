#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "cdev/error.hpp"
#include "cdev/observables.hpp"
#include "cdev/synthgen.hpp"

using namespace cdev;

namespace {

std::vector<double> zeros_x(std::size_t dim = 95) { return std::vector<double>(dim, 0.0); }

LatentInput input_for(std::vector<double> x, int bit, double dose, int n_bits = 5) {
  std::vector<double> t(static_cast<std::size_t>(n_bits), 0.0);
  t[static_cast<std::size_t>(bit)] = dose;
  return {std::move(x), std::move(t)};
}

// Straightforward FNV-1a 64 over the bytes of a double array, for
// comparison with the library's version.
std::uint64_t fnv1a(const std::vector<double>& x) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<unsigned char> bytes(x.size() * sizeof(double));
  std::memcpy(bytes.data(), x.data(), bytes.size());
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

TEST_CASE("zero covariate vector hashes to the frozen golden seed") {
  // Computed once with an independent FNV-1a implementation over 760 zero bytes.
  CHECK(hash_covariates(zeros_x()) == 0x4215b679fbc9dc85ULL);
  CHECK(derive_rng(zeros_x()).seed() == 0x4215b679fbc9dc85ULL);
}

TEST_CASE("covariate hash matches a byte-level FNV-1a oracle") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(95);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    CHECK(hash_covariates(x) == fnv1a(x));
  }
  CHECK(hash_covariates(std::vector<double>{1.0}) == 0xaab1693229ba1db8ULL);
}

TEST_CASE("a one-ulp change in one coordinate changes the seed") {
  auto x = zeros_x();
  x[17] = 0.25;
  auto y = x;
  y[17] = std::nextafter(0.25, 1.0);
  CHECK(derive_rng(x).seed() != derive_rng(y).seed());
  auto z = x;
  z[0] = std::numeric_limits<double>::denorm_min();
  CHECK(derive_rng(x).seed() != derive_rng(z).seed());
}

TEST_CASE("derive_rng rejects non-finite covariates") {
  auto x = zeros_x();
  x[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(derive_rng(x), DataError);
}

TEST_CASE("Rng streams are reproducible and forks are independent") {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng c(42);
  CHECK(c.fork(1).next() != c.fork(2).next());
  CHECK(c.fork(1).next() == Rng(42).fork(1).next());
  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("Rng normal draws have roughly zero mean and unit variance") {
  Rng r(123);
  double s = 0.0;
  double ss = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    ss += v * v;
  }
  CHECK(std::abs(s / n) < 0.03);
  CHECK(std::abs(ss / n - 1.0) < 0.05);
}

TEST_CASE("synth_coda is deterministic in (x, t)") {
  const auto enc = PlantedEncoding::defaults();
  const GeneratorConfig cfg;
  auto x = zeros_x();
  x[5] = 0.3;
  const auto a = synth_coda(input_for(x, 1, 7.5), enc, cfg);
  const auto b = synth_coda(input_for(x, 1, 7.5), enc, cfg);
  CHECK(a.clip.samples == b.clip.samples);
  CHECK(a.clip.size() == 65536);
  CHECK(a.clip.sample_rate == 32000);
  for (double v : a.clip.samples) {
    REQUIRE(std::abs(v) <= 1.0);
  }
  const auto c = synth_coda(input_for(x, 1, 8.0), enc, cfg);
  CHECK(a.clip.samples != c.clip.samples);
}

TEST_CASE("all-zero treatment gives five clicks at the base ICI") {
  const auto enc = PlantedEncoding::defaults();
  GeneratorConfig cfg;
  cfg.unit_click_offset = 0.0;
  cfg.ici_unit_spread = 0.0;
  MeasureConfig mcfg;
  Rng rng(5);
  for (int unit = 0; unit < 10; ++unit) {
    std::vector<double> x(95);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    const LatentInput in{x, std::vector<double>(5, 0.0)};
    const auto out = synth_coda(in, enc, cfg);
    CHECK(out.planted.onsets.size() == 5);
    // Entangled terms vanish at t = 0 (tanh(0) = 0).
    CHECK(out.planted.mean_ici == doctest::Approx(0.2).epsilon(1e-12));
    const auto rec = measure(out.clip, unit, 0, 0.0, mcfg);
    CHECK(rec.n_clicks == 5);
    REQUIRE(rec.mean_ici);
    const double planted_mean = (out.planted.onsets.back() - out.planted.onsets.front()) / 4.0;
    CHECK(std::abs(*rec.mean_ici - planted_mean) < 0.001);
  }
}

TEST_CASE("bit 1 at dose 12.5 with slope 0.5 plants eleven clicks") {
  const auto enc = PlantedEncoding::defaults();
  GeneratorConfig cfg;
  cfg.unit_click_offset = 0.0;
  MeasureConfig mcfg;
  Rng rng(11);
  for (int unit = 0; unit < 8; ++unit) {
    std::vector<double> x(95);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    const auto out = synth_coda(input_for(x, 1, 12.5), enc, cfg);
    // 5 + round(0.5 * (12.5 - 1)) = 5 + round(5.75) = 11
    CHECK(out.planted.onsets.size() == 11);
    CHECK_FALSE(out.planted.degenerate);
    CHECK(measure(out.clip, unit, 1, 12.5, mcfg).n_clicks == 11);
  }
}

TEST_CASE("detected clicks match planted onsets within 1 ms") {
  const auto enc = PlantedEncoding::defaults();
  const GeneratorConfig cfg;
  MeasureConfig mcfg;
  Rng rng(21);
  for (int unit = 0; unit < 6; ++unit) {
    std::vector<double> x(95);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    for (double dose : {-1.0, 0.0, 1.0, 6.0, 12.5}) {
      const auto out = synth_coda(input_for(x, unit % 5, dose), enc, cfg);
      const auto train = detect_clicks(out.clip, mcfg.detector);
      REQUIRE(train.size() == out.planted.onsets.size());
      for (std::size_t k = 0; k < train.size(); ++k) {
        CHECK(std::abs(train.times[k] - out.planted.onsets[k]) <= 0.001);
      }
    }
  }
}

TEST_CASE("carriers follow the spectral-mean bit and stay clamped") {
  const auto enc = PlantedEncoding::defaults();
  const GeneratorConfig cfg;
  const auto x = zeros_x();
  const auto lo = plan_coda(input_for(x, 0, 1.0), enc, cfg);
  const auto hi = plan_coda(input_for(x, 0, 11.0), enc, cfg);
  double mean_lo = 0.0;
  double mean_hi = 0.0;
  for (double c : lo.carriers) mean_lo += c / static_cast<double>(lo.carriers.size());
  for (double c : hi.carriers) mean_hi += c / static_cast<double>(hi.carriers.size());
  // Slope 1 per dose above 1, scaled by carrier_step_hz (200 Hz): +2000 Hz.
  CHECK(mean_hi - mean_lo == doctest::Approx(2000.0).epsilon(0.02));
  for (double c : hi.carriers) {
    CHECK(c >= cfg.carrier_min_hz);
    CHECK(c <= cfg.carrier_max_hz);
  }
}

TEST_CASE("entangled effects saturate beyond dose 1") {
  const auto enc = PlantedEncoding::defaults();
  GeneratorConfig cfg;
  cfg.noise_base = 0.0;
  const auto x = zeros_x();
  // Bit 4 only has an entangled spectral-mean term and a noise term.
  const auto a = plan_coda(input_for(x, 4, 2.0), enc, cfg);
  const auto b = plan_coda(input_for(x, 4, 12.0), enc, cfg);
  CHECK(a.carriers == b.carriers);
  CHECK(a.onsets == b.onsets);
  CHECK(b.noise_sigma > a.noise_sigma);
  const auto c = plan_coda(input_for(x, 4, 0.5), enc, cfg);
  CHECK(c.carriers != a.carriers);
}

TEST_CASE("noise is capped at noise_max") {
  const auto enc = PlantedEncoding::defaults();
  const GeneratorConfig cfg;
  const auto p = plan_coda(input_for(zeros_x(), 2, 1e6), enc, cfg);
  CHECK(p.noise_sigma == cfg.noise_max);
}

TEST_CASE("codas that do not fit are shortened and flagged") {
  PlantedEncoding enc = PlantedEncoding::defaults();
  enc.bits[1].slope = 5.0;
  const GeneratorConfig cfg;
  const auto p = plan_coda(input_for(zeros_x(), 1, 12.5), enc, cfg);
  CHECK(p.degenerate);
  const double duration = static_cast<double>(cfg.clip_len) / cfg.sample_rate;
  CHECK(p.onsets.back() + cfg.tail_s <= duration);
  CHECK(p.carriers.size() == p.onsets.size());
}

TEST_CASE("encoding and generator validation") {
  PlantedEncoding enc = PlantedEncoding::defaults();
  enc.bits[2].target = Observable::kNClicks;
  CHECK_THROWS_AS(enc.validate(), ConfigError);
  enc = PlantedEncoding::defaults();
  enc.bits[0].target = Observable::kCodaSpectralMean;
  CHECK_THROWS_AS(enc.validate(), ConfigError);
  CHECK_THROWS_AS(PlantedEncoding::defaults(3), ConfigError);
  CHECK(PlantedEncoding::defaults().target_bit(Observable::kNClicks) == 1);
  CHECK(PlantedEncoding::defaults().target_bit(Observable::kSpectralMean) == 0);
  CHECK(PlantedEncoding::defaults().target_bit(Observable::kSpectralStd) == 3);
  CHECK_FALSE(PlantedEncoding::defaults().target_bit(Observable::kMeanIci));

  GeneratorConfig cfg;
  cfg.carrier_max_hz = 20000.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(plan_coda(input_for(zeros_x(), 0, 0.0, 4), PlantedEncoding::defaults(), GeneratorConfig{}),
                  ConfigError);
  auto x = zeros_x();
  x[0] = 1.5;
  CHECK_THROWS_AS(plan_coda(input_for(x, 0, 0.0), PlantedEncoding::defaults(), GeneratorConfig{}), DataError);
}

TEST_CASE("draw_covariates is seeded, bounded and unit-ordered") {
  const auto a = draw_covariates(1, 4, 95);
  const auto b = draw_covariates(1, 6, 95);
  REQUIRE(a.size() == 4);
  for (std::size_t u = 0; u < a.size(); ++u) CHECK(a[u] == b[u]);
  for (const auto& x : a) {
    for (double v : x) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(draw_covariates(2, 4, 95)[0] != a[0]);
  CHECK_THROWS_AS(draw_covariates(1, 0, 95), ConfigError);
}
