#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cdev/causal.hpp"
#include "cdev/error.hpp"

using namespace cdev;

namespace {

ObservableRecord rec(int unit, int bit, double dose, double value, int n_clicks = 5) {
  ObservableRecord r;
  r.unit_id = unit;
  r.bit = bit;
  r.dose = dose;
  r.n_clicks = n_clicks;
  r.spectral_mean_hz = value;
  if (n_clicks >= 2) r.mean_ici = value;
  return r;
}

// Records for a function f(unit, dose) over a grid.
template <typename F>
std::vector<ObservableRecord> table(int n_units, const std::vector<double>& doses, F f, int bit = 0) {
  std::vector<ObservableRecord> out;
  for (int u = 0; u < n_units; ++u) {
    for (double d : doses) out.push_back(rec(u, bit, d, f(u, d)));
  }
  return out;
}

const std::vector<double> kGrid{-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0};

Spectrum spectrum(std::vector<double> power, double df = 10.0) {
  Spectrum s;
  s.power = std::move(power);
  for (std::size_t i = 0; i < s.power.size(); ++i) s.bin_freqs.push_back(static_cast<double>(i) * df);
  return s;
}

Spectrum random_spectrum(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(n);
  double total = 0.0;
  for (auto& v : p) {
    v = u(rng) < 0.3 ? 0.0 : u(rng);
    total += v;
  }
  if (total == 0.0) {
    p[0] = 1.0;
    total = 1.0;
  }
  for (auto& v : p) v /= total;
  return spectrum(std::move(p), 7.8125);
}

// Optimal transport between two 1-D discrete distributions by the
// north-west corner rule on sorted support, which is optimal in 1-D.
double transport_oracle(const Spectrum& p, const Spectrum& q) {
  std::size_t i = 0;
  std::size_t j = 0;
  double a = p.power[0];
  double b = q.power[0];
  long double cost = 0.0L;
  while (i < p.size() && j < q.size()) {
    const double m = std::min(a, b);
    cost += static_cast<long double>(m) * std::abs(p.bin_freqs[i] - q.bin_freqs[j]);
    a -= m;
    b -= m;
    if (a <= 0.0 && ++i < p.size()) a = p.power[i];
    if (b <= 0.0 && ++j < q.size()) b = q.power[j];
  }
  return static_cast<double>(cost);
}

}  // namespace

TEST_CASE("Neumaier summation recovers cancelled small terms") {
  NeumaierSum s;
  s.add(1.0);
  s.add(1e100);
  s.add(1.0);
  s.add(-1e100);
  CHECK(s.value() == 2.0);
}

TEST_CASE("build_grid sorts units and drops absent values") {
  std::vector<ObservableRecord> r{rec(3, 0, 1.0, 7.0), rec(1, 0, 1.0, 5.0), rec(2, 0, 0.0, 1.0, 1),
                                  rec(2, 1, 0.0, 9.0)};
  const auto g = build_grid(r, 0, Observable::kMeanIci);
  REQUIRE(g.doses == std::vector<double>{0.0, 1.0});
  CHECK(g.count(0) == 0);
  REQUIRE(g.count(1) == 2);
  CHECK(g.values[1][0].unit_id == 1);
  CHECK(g.values[1][1].unit_id == 3);
  r.push_back(rec(1, 0, 1.0, 6.0));
  CHECK_THROWS_AS(build_grid(r, 0, Observable::kMeanIci), DataError);
}

TEST_CASE("ATE of constant outcomes is a zero curve") {
  const auto g = build_grid(table(4, kGrid, [](int, double) { return 3.25; }), 0, Observable::kSpectralMean);
  const auto c = ate_curve(g, -1.0);
  for (const auto& e : c.estimates) CHECK(*e == 0.0);
}

TEST_CASE("ATE of Y = t is t minus the baseline") {
  const auto g = build_grid(table(3, kGrid, [](int, double d) { return d; }), 0, Observable::kSpectralMean);
  for (double base : {-1.0, 1.0}) {
    const auto c = ate_curve(g, base);
    REQUIRE(c.baseline == base);
    for (std::size_t k = 0; k < kGrid.size(); ++k) CHECK(*c.estimates[k] == doctest::Approx(kGrid[k] - base));
    CHECK(*c.estimates[*g.find_dose(base)] == 0.0);
  }
}

TEST_CASE("ATE hand example: baseline {3,5}, dose {6,10} gives 4") {
  const std::vector<ObservableRecord> r{rec(0, 2, -1.0, 3.0), rec(1, 2, -1.0, 5.0), rec(0, 2, 4.0, 6.0),
                                        rec(1, 2, 4.0, 10.0)};
  const auto c = ate_curve(build_grid(r, 2, Observable::kSpectralMean), -1.0);
  CHECK(c.estimates[1] == 4.0);
  CHECK(c.n[1] == 2);
  // Differences {3, 5}: sample std sqrt(2), SE = sqrt(2)/sqrt(2) = 1.
  CHECK(*c.std_errors[1] == doctest::Approx(1.0));
}

TEST_CASE("ATE pairs units and leaves unpaired doses absent") {
  std::vector<ObservableRecord> r{rec(0, 0, -1.0, 1.0), rec(1, 0, -1.0, 100.0), rec(0, 0, 1.0, 4.0),
                                  rec(2, 0, 2.0, 8.0)};
  const auto c = ate_curve(build_grid(r, 0, Observable::kSpectralMean), -1.0);
  REQUIRE(c.doses == std::vector<double>{-1.0, 1.0, 2.0});
  CHECK(c.estimates[1] == 3.0);  // only unit 0 is paired
  CHECK(c.n[1] == 1);
  CHECK_FALSE(c.estimates[2]);
  CHECK(c.n[2] == 0);
  CHECK_THROWS_AS(ate_curve(build_grid(r, 0, Observable::kSpectralMean), 0.25), ConfigError);
}

TEST_CASE("baseline-shift identity") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 3.0);
  const auto g = build_grid(table(30, kGrid, [&](int, double) { return n(rng); }), 0, Observable::kSpectralMean);
  const auto from_s = ate_curve(g, 2.0);
  const auto from_t = ate_curve(g, -1.0);
  const double at_t = *from_s.estimates[0];
  for (std::size_t k = 0; k < kGrid.size(); ++k) {
    CHECK(std::abs((*from_s.estimates[k] - at_t) - *from_t.estimates[k]) <= 1e-12 * (1.0 + std::abs(at_t)));
  }
}

TEST_CASE("dispersion curve examples") {
  const std::vector<ObservableRecord> r{rec(0, 0, 0.0, 4.0), rec(1, 0, 0.0, 6.0), rec(0, 0, 1.0, 2.0),
                                        rec(1, 0, 1.0, 8.0)};
  const auto g = build_grid(r, 0, Observable::kSpectralMean);
  const auto c = dispersion_curve(g, 0.0);
  CHECK(c.estimates[0] == 0.0);
  CHECK(*c.estimates[1] == doctest::Approx(2.0));

  auto doubled = r;
  for (auto& x : doubled) *x.spectral_mean_hz *= 2.0;
  CHECK(*dispersion_curve(build_grid(doubled, 0, Observable::kSpectralMean), 0.0).estimates[1] ==
        doctest::Approx(4.0));

  const auto same = build_grid(table(5, kGrid, [](int, double d) { return d * d; }), 0, Observable::kSpectralMean);
  for (const auto& e : dispersion_curve(same, 1.0).estimates) CHECK(*e == doctest::Approx(0.0));

  const std::vector<ObservableRecord> lone{rec(0, 0, 0.0, 4.0), rec(1, 0, 0.0, 6.0), rec(0, 0, 1.0, 2.0)};
  CHECK_FALSE(dispersion_curve(build_grid(lone, 0, Observable::kSpectralMean), 0.0).estimates[1]);
}

TEST_CASE("ICE of Y = a t is constant a and zero for constant Y") {
  const double a = -0.37;
  const auto g = build_grid(table(4, kGrid, [&](int u, double d) { return a * d + u; }), 0,
                            Observable::kSpectralMean);
  const auto c = ice_curve(g);
  REQUIRE(c.estimates.size() == kGrid.size() - 1);
  CHECK_FALSE(c.baseline);
  for (std::size_t k = 0; k + 1 < kGrid.size(); ++k) {
    CHECK(c.doses[k] == kGrid[k]);
    CHECK(*c.estimates[k] == doctest::Approx(a).epsilon(1e-12));
  }
  const auto z = ice_curve(build_grid(table(4, kGrid, [](int, double) { return 2.0; }), 0, Observable::kSpectralMean));
  for (const auto& e : z.estimates) CHECK(*e == 0.0);

  const std::vector<ObservableRecord> single{rec(0, 0, 0.0, 1.0)};
  CHECK_THROWS_AS(ice_curve(build_grid(single, 0, Observable::kSpectralMean)), DataError);
}

TEST_CASE("telescoping ICE sums reproduce the ATE") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 50.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ObservableRecord> r;
  for (int unit = 0; unit < 40; ++unit) {
    for (double d : kGrid) {
      auto x = rec(unit, 1, d, 1000.0 + n(rng));
      if (u(rng) < 0.1) x.spectral_mean_hz.reset();
      r.push_back(x);
    }
  }
  const auto g = complete_cases(build_grid(r, 1, Observable::kSpectralMean));
  REQUIRE(g.count(0) > 5);
  for (std::size_t k = 1; k < g.doses.size(); ++k) CHECK(g.count(k) == g.count(0));
  const auto ice = ice_curve(g);
  for (std::size_t b = 0; b < g.doses.size(); ++b) {
    const auto ate = ate_curve(g, g.doses[b]);
    for (std::size_t k = 0; k < g.doses.size(); ++k) {
      NeumaierSum s;
      const std::size_t lo = std::min(b, k);
      const std::size_t hi = std::max(b, k);
      for (std::size_t j = lo; j < hi; ++j) s.add(*ice.estimates[j] * (g.doses[j + 1] - g.doses[j]));
      const double tele = k >= b ? s.value() : -s.value();
      CHECK(std::abs(tele - *ate.estimates[k]) <= 1e-9 * std::max(1.0, std::abs(*ate.estimates[k])));
    }
  }
}

TEST_CASE("theta_fs examples") {
  const double a = 1.75;
  const auto g = build_grid(table(3, kGrid, [&](int, double d) { return a * d; }), 0, Observable::kSpectralMean);
  CHECK(std::abs(*theta_fs(g) - a) <= 1e-12);
  CHECK(std::abs(*theta_fs(g, 1.0) - a) <= 1e-12);

  EffectCurve ice;
  ice.doses = {0.0, 1.0};
  ice.estimates = {1.0, -1.0};
  CHECK(*theta_fs(ice) == 0.0);

  ice.doses = {0.0, 1.0, 2.0};
  ice.estimates = {0.1, 0.2, 0.3};
  CHECK(*theta_fs(ice, 0.5) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_THROWS_AS(theta_fs(ice, 5.0), DataError);

  ice.estimates = {0.1, std::nullopt, 0.3};
  CHECK(*theta_fs(ice) == doctest::Approx(0.2));
  ice.estimates = {0.1, std::nullopt, std::nullopt};
  CHECK_FALSE(theta_fs(ice, 1.0));
}

TEST_CASE("curve_theta is the mean slope of an ATE curve") {
  const auto g = build_grid(table(3, kGrid, [](int, double d) { return 4.0 * d; }), 0, Observable::kSpectralMean);
  CHECK(*curve_theta(ate_curve(g, 1.0)) == doctest::Approx(4.0));
  CHECK(*curve_theta(ate_curve(g, 1.0), 1.0) == doctest::Approx(4.0));
}

TEST_CASE("stratify partitions records by click count") {
  const auto all5 = table(4, kGrid, [](int, double d) { return d; });
  const auto s = stratify(all5, 0, Observable::kMeanIci);
  REQUIRE(s.size() == 1);
  REQUIRE(s.count(5) == 1);
  std::size_t total = 0;
  for (std::size_t k = 0; k < kGrid.size(); ++k) total += s.at(5).count(k);
  CHECK(total == all5.size());

  std::vector<ObservableRecord> mixed;
  std::size_t present = 0;
  for (int u = 0; u < 30; ++u) {
    for (double d : kGrid) {
      const int n = (u * 7 + static_cast<int>(d * 2)) % 6;
      mixed.push_back(rec(u, 0, d, d + u, n));
      present += n >= 2;
    }
  }
  const auto m = stratify(mixed, 0, Observable::kMeanIci);
  CHECK_FALSE(m.count(0));
  CHECK_FALSE(m.count(1));
  std::size_t sum = 0;
  for (const auto& [k, grid] : m) {
    CHECK(grid.stratum == k);
    CHECK(grid.doses == kGrid);
    for (std::size_t i = 0; i < grid.doses.size(); ++i) sum += grid.count(i);
  }
  CHECK(sum == present);
}

TEST_CASE("sign score examples") {
  const std::vector<std::optional<double>> bit1{-0.018, -0.011, -0.011, -0.009, -0.007,
                                                -0.006, -0.003, -0.003, -0.003, -0.007};
  CHECK(sign_score(bit1) == -10);
  const std::vector<std::optional<double>> four{0.1, 2.0, 1e-9, 5.0};
  CHECK(sign_score(four) == 4);
  const std::vector<std::optional<double>> mix{0.5, -0.5, 0.0};
  CHECK(sign_score(mix) == 0);
  const std::vector<std::optional<double>> na{0.5, std::nullopt, std::nullopt};
  CHECK(sign_score(na, NaConvention::kZero) == 1);
  CHECK(sign_score(na, NaConvention::kMinusOne) == -1);
}

TEST_CASE("Wasserstein examples") {
  const auto p = spectrum({0.25, 0.25, 0.5, 0.0});
  CHECK(wasserstein_1d(p, p) == 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      std::vector<double> a(6, 0.0);
      std::vector<double> b(6, 0.0);
      a[i] = 1.0;
      b[j] = 1.0;
      CHECK(wasserstein_1d(spectrum(a), spectrum(b)) == std::abs(10.0 * static_cast<double>(i) - 10.0 * static_cast<double>(j)));
    }
  }
  CHECK(wasserstein_1d(spectrum({0.5, 0.5}), spectrum({1.0, 0.0})) == 5.0);
  CHECK_THROWS_AS(wasserstein_1d(spectrum({0.5, 0.5}), spectrum({0.5, 0.4})), DataError);
  CHECK_THROWS_AS(wasserstein_1d(spectrum({0.5, 0.5}), spectrum({1.0, 0.0, 0.0})), DataError);
  CHECK_THROWS_AS(wasserstein_1d(spectrum({0.5, 0.5}), spectrum({1.0, 0.0}, 20.0)), DataError);
}

TEST_CASE("Wasserstein matches a transport oracle and is a metric") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_spectrum(rng, 40);
    const auto q = random_spectrum(rng, 40);
    const auto r = random_spectrum(rng, 40);
    const double pq = wasserstein_1d(p, q);
    CHECK(pq == doctest::Approx(transport_oracle(p, q)).epsilon(1e-10));
    CHECK(pq >= 0.0);
    CHECK(std::abs(pq - wasserstein_1d(q, p)) <= 1e-12);
    CHECK(pq <= wasserstein_1d(p, r) + wasserstein_1d(r, q) + 1e-12);
  }
}

TEST_CASE("spectral distance curve follows a linearly moving point mass") {
  SpectrumGrid grid;
  const std::vector<double> doses{-1.0, 0.0, 1.0, 2.0, 3.0};
  for (double d : doses) {
    std::vector<double> p(20, 0.0);
    p[static_cast<std::size_t>(5 + 2 * d)] = 1.0;
    grid[{1, d}] = {spectrum(p), 3};
  }
  grid[{1, 4.0}] = {std::nullopt, 0};
  grid[{0, 1.0}] = {spectrum(std::vector<double>(20, 0.05)), 3};
  const auto c = spectral_distance_curve(grid, 1, 1.0);
  CHECK(c.observable == "coda_spectrum");
  REQUIRE(c.doses == std::vector<double>{-1.0, 0.0, 1.0, 2.0, 3.0, 4.0});
  for (std::size_t k = 0; k < doses.size(); ++k) CHECK(*c.estimates[k] == std::abs(doses[k] - 1.0) * 20.0);
  CHECK(c.estimates[2] == 0.0);
  CHECK_FALSE(c.estimates[5]);
  CHECK_THROWS_AS(spectral_distance_curve(grid, 1, 7.0), ConfigError);

  SpectrumGrid flat;
  for (double d : doses) flat[{0, d}] = {spectrum({0.2, 0.3, 0.5}), 1};
  for (const auto& e : spectral_distance_curve(flat, 0, -1.0).estimates) CHECK(*e == 0.0);
}

TEST_CASE("estimators do not depend on record order") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  auto r = table(25, kGrid, [&](int, double d) { return d + n(rng); });
  const auto g1 = build_grid(r, 0, Observable::kSpectralMean);
  std::shuffle(r.begin(), r.end(), rng);
  const auto g2 = build_grid(r, 0, Observable::kSpectralMean);
  CHECK(ate_curve(g1, -1.0).estimates == ate_curve(g2, -1.0).estimates);
  CHECK(ice_curve(g1).estimates == ice_curve(g2).estimates);
  CHECK(dispersion_curve(g1, -1.0).estimates == dispersion_curve(g2, -1.0).estimates);
  CHECK(theta_fs(g1) == theta_fs(g2));
}
