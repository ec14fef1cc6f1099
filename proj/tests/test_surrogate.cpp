#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "cdev/error.hpp"
#include "cdev/surrogate.hpp"

using namespace cdev;

namespace {

struct Problem {
  Matrix x;
  std::vector<double> y;
};

Problem line_problem(std::size_t n, std::uint64_t seed, std::size_t cols = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Problem p{Matrix(n, cols), std::vector<double>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < cols; ++c) p.x.at(r, c) = u(rng);
    p.y[r] = 3.0 * p.x.at(r, 0);
  }
  return p;
}

double r_squared(std::span<const double> pred, std::span<const double> y) {
  double mean = 0.0;
  for (double v : y) mean += v / static_cast<double>(y.size());
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - pred[i]) * (y[i] - pred[i]);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  return 1.0 - ss_res / ss_tot;
}

// Dose-response data shaped like one bit of a corpus: slot 1 carries the
// dose, slots 0 and 2 stay zero, then `dim` covariates per unit.
SurrogateData dose_data(int n_units, double slope, double noise, std::uint64_t seed, bool shuffle = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> e(0.0, noise);
  const std::size_t dim = 6;
  std::vector<double> doses;
  for (double d = -1.0; d <= 12.5; d += 0.5) doses.push_back(d);
  SurrogateData s;
  s.treatment_feature = 1;
  s.x = Matrix(static_cast<std::size_t>(n_units) * doses.size(), 3 + dim);
  for (int t = 0; t < 3; ++t) s.feature_names.push_back("t" + std::to_string(t));
  for (std::size_t j = 0; j < dim; ++j) s.feature_names.push_back("x" + std::to_string(j));
  std::size_t row = 0;
  for (int unit = 0; unit < n_units; ++unit) {
    std::vector<double> x(dim);
    for (auto& v : x) v = u(rng);
    for (double d : doses) {
      s.x.at(row, 1) = d;
      for (std::size_t j = 0; j < dim; ++j) s.x.at(row, 3 + j) = x[j];
      s.y.push_back(5.0 + slope * std::max(d, 1.0) + 0.3 * x[0] + e(rng));
      s.group.push_back(unit);
      s.dose.push_back(d);
      ++row;
    }
  }
  if (shuffle) std::shuffle(s.y.begin(), s.y.end(), rng);
  return s;
}

SurrogateConfig fast_config() {
  SurrogateConfig cfg;
  cfg.n_trees_max = 150;
  cfg.permutation_repeats = 3;
  return cfg;
}

}  // namespace

TEST_CASE("surrogate config validation names the key") {
  SurrogateConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.max_leaves_grid = {2, 1};
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("surrogate.max_leaves_grid") == 0);
  }
  cfg = SurrogateConfig{};
  cfg.validation_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = SurrogateConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("feature bins split at quantiles and respect edges") {
  Matrix x(1000, 1);
  for (std::size_t r = 0; r < 1000; ++r) x.at(r, 0) = static_cast<double>(r % 10);
  const auto bins = FeatureBins::fit(x, 256);
  REQUIRE(bins.edges[0].size() == 9);
  for (int v = 0; v < 10; ++v) CHECK(bins.bin(0, v) == v);
  CHECK(bins.bin(0, -5.0) == 0);
  CHECK(bins.bin(0, 100.0) == 9);
  const auto many = FeatureBins::fit(line_problem(5000, 1).x, 256);
  CHECK(many.edges[0].size() <= 255);
  CHECK(std::is_sorted(many.edges[0].begin(), many.edges[0].end()));
}

TEST_CASE("constant target gives a constant model with no trees") {
  auto p = line_problem(200, 2);
  std::fill(p.y.begin(), p.y.end(), 4.5);
  const auto m = fit_gbrt(p.x, p.y, p.x, p.y, 8, SurrogateConfig{});
  CHECK(m.trees.empty());
  CHECK(m.base == 4.5);
  const auto pred = m.predict(p.x);
  CHECK(mean_squared_error(pred, p.y) == 0.0);
  for (double v : permutation_importance(m, p.x, p.y, SurrogateConfig{})) CHECK(v == 0.0);
}

TEST_CASE("y = 3 x0 with a 13-leaf cap generalizes with R^2 above 0.99") {
  const auto train = line_problem(2000, 3);
  const auto val = line_problem(300, 4);
  const auto test = line_problem(1000, 5);
  const auto m = fit_gbrt(train.x, train.y, val.x, val.y, 13, SurrogateConfig{});
  CHECK(!m.trees.empty());
  for (const auto& t : m.trees) CHECK(t.leaf_count() <= 13);
  CHECK(r_squared(m.predict(test.x), test.y) > 0.99);
  // Raw-threshold and binned traversal agree on the training rows.
  const auto binned = m.bins.transform(train.x);
  for (std::size_t r = 0; r < 50; ++r) {
    for (const auto& t : m.trees) CHECK(t.predict(train.x.row(r)) == t.predict_binned(binned.data(), train.x.rows, r));
  }
}

TEST_CASE("early stopping keeps the best validation iteration") {
  auto train = line_problem(400, 6);
  auto val = line_problem(100, 7);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> e(0.0, 1.0);
  for (auto& v : train.y) v += e(rng);
  for (auto& v : val.y) v += e(rng);
  SurrogateConfig cfg;
  cfg.patience = 5;
  const auto m = fit_gbrt(train.x, train.y, val.x, val.y, 34, cfg);
  REQUIRE(!m.val_mse.empty());
  CHECK(m.trees.size() == m.best_iteration);
  const double best = *std::min_element(m.val_mse.begin(), m.val_mse.end());
  CHECK(m.val_mse[m.best_iteration] == best);
  CHECK(m.val_mse.size() <= m.best_iteration + 1 + 5);
  CHECK(mean_squared_error(m.predict(val.x), val.y) == doctest::Approx(best).epsilon(1e-9));
  // The running best is non-increasing by construction.
  double running = m.val_mse[0];
  for (double v : m.val_mse) {
    const double next = std::min(running, v);
    CHECK(next <= running);
    running = next;
  }
}

TEST_CASE("fit_gbrt rejects too few rows and non-finite features") {
  const auto small = line_problem(30, 8);
  CHECK_THROWS_AS(fit_gbrt(small.x, small.y, small.x, small.y, 8, SurrogateConfig{}), DataError);
  auto bad = line_problem(100, 9);
  bad.x.at(3, 1) = std::nan("");
  CHECK_THROWS_AS(fit_gbrt(bad.x, bad.y, bad.x, bad.y, 8, SurrogateConfig{}), DataError);
}

TEST_CASE("permutation importance singles out the informative feature") {
  const auto train = line_problem(1000, 10, 6);
  const auto val = line_problem(200, 11, 6);
  const auto m = fit_gbrt(train.x, train.y, val.x, val.y, 8, SurrogateConfig{});
  SurrogateConfig one;
  one.permutation_repeats = 1;
  const auto imp10 = permutation_importance(m, val.x, val.y, SurrogateConfig{});
  const auto imp1 = permutation_importance(m, val.x, val.y, one);
  CHECK(importance_rank(imp10, 0) == 1);
  CHECK(importance_rank(imp1, 0) == 1);
  for (std::size_t j = 1; j < imp10.size(); ++j) CHECK(imp10[0] > imp10[j]);
  // Same seed, same importances.
  CHECK(permutation_importance(m, val.x, val.y, SurrogateConfig{}) == imp10);
}

TEST_CASE("importance rank counts ties against the feature") {
  const std::vector<double> imp{0.5, 0.5, 0.1, -0.2};
  CHECK(importance_rank(imp, 0) == 2);
  CHECK(importance_rank(imp, 1) == 2);
  CHECK(importance_rank(imp, 2) == 3);
  CHECK(importance_rank(imp, 3) == 4);
}

TEST_CASE("fits are reproducible") {
  const auto train = line_problem(500, 12);
  const auto val = line_problem(100, 13);
  const auto a = fit_gbrt(train.x, train.y, val.x, val.y, 5, SurrogateConfig{});
  const auto b = fit_gbrt(train.x, train.y, val.x, val.y, 5, SurrogateConfig{});
  REQUIRE(a.trees.size() == b.trees.size());
  for (std::size_t i = 0; i < a.trees.size(); ++i) {
    REQUIRE(a.trees[i].nodes.size() == b.trees[i].nodes.size());
    for (std::size_t k = 0; k < a.trees[i].nodes.size(); ++k) {
      CHECK(a.trees[i].nodes[k].feature == b.trees[i].nodes[k].feature);
      CHECK(a.trees[i].nodes[k].threshold == b.trees[i].nodes[k].threshold);
      CHECK(a.trees[i].nodes[k].value == b.trees[i].nodes[k].value);
    }
  }
  CHECK(a.val_mse == b.val_mse);
}

TEST_CASE("split_by_group holds out whole units") {
  std::vector<int> group;
  for (int u = 0; u < 200; ++u) {
    for (int k = 0; k < 5; ++k) group.push_back(u);
  }
  const auto s = split_by_group(group, SurrogateConfig{});
  CHECK(s.train.size() + s.val.size() == group.size());
  CHECK(s.val.size() == 100);
  std::set<int> val_units;
  for (auto i : s.val) val_units.insert(group[i]);
  for (auto i : s.train) CHECK_FALSE(val_units.count(group[i]));
  const auto again = split_by_group(group, SurrogateConfig{});
  CHECK(again.val == s.val);
}

TEST_CASE("build_surrogate_data places the dose in the bit's slot") {
  std::vector<ObservableRecord> recs;
  for (int u = 0; u < 3; ++u) {
    for (double d : {-1.0, 2.0}) {
      ObservableRecord r;
      r.unit_id = u;
      r.bit = 2;
      r.dose = d;
      r.n_clicks = 4 + u;
      recs.push_back(r);
    }
  }
  ObservableRecord other;
  other.bit = 0;
  recs.push_back(other);
  const std::vector<std::vector<double>> cov{{0.1, 0.2}, {0.3, 0.4}, {0.5, 0.6}};
  const auto d = build_surrogate_data(recs, cov, 4, 2, Observable::kNClicks);
  REQUIRE(d.x.rows == 6);
  CHECK(d.x.cols == 6);
  CHECK(d.treatment_feature == 2);
  CHECK(d.feature_names == std::vector<std::string>{"t0", "t1", "t2", "t3", "x0", "x1"});
  for (std::size_t r = 0; r < 6; ++r) {
    CHECK(d.x.at(r, 2) == d.dose[r]);
    CHECK(d.x.at(r, 0) == 0.0);
    CHECK(d.x.at(r, 4) == cov[static_cast<std::size_t>(d.group[r])][0]);
    CHECK(d.y[r] == 4 + d.group[r]);
  }
  const auto s = build_surrogate_data(recs, cov, 4, 2, Observable::kNClicks, 5);
  CHECK(s.x.rows == 2);
  CHECK_THROWS_AS(build_surrogate_data(recs, {{0.1}}, 4, 2, Observable::kNClicks), DataError);
}

TEST_CASE("consistency scan: planted dose response is consistent") {
  const auto data = dose_data(60, 0.5, 0.3, 21);
  const auto r = consistency_scan(data, fast_config());
  REQUIRE(r.caps.size() == 7);
  CHECK(r.consistent);
  CHECK(r.gain > 0.5);
  for (const auto& c : r.caps) {
    if (c.qualifying) {
      CHECK(c.treatment_rank == 1);
      CHECK(c.top_feature == "t1");
    }
  }
  REQUIRE(r.doses.size() == 28);
  for (std::size_t k = 0; k < r.doses.size(); ++k) {
    CHECK(std::abs(r.predicted_mean[k] - r.empirical_mean[k]) <= 0.05 * std::abs(r.empirical_mean[k]));
  }
}

TEST_CASE("consistency scan: shuffled outcomes are not consistent") {
  int consistent = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = consistency_scan(dose_data(60, 0.5, 0.3, 100 + seed, true), fast_config());
    CHECK(r.gain < 0.05);
    consistent += r.consistent;
  }
  CHECK(consistent <= 1);
}

TEST_CASE("consistency scan refuses tiny inputs") {
  const auto data = dose_data(1, 0.5, 0.3, 1);
  CHECK_THROWS_AS(consistency_scan(data, fast_config()), DataError);
}
