#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdev/observables.hpp"

namespace cdev {

struct SurrogateConfig {
  std::vector<int> max_leaves_grid{2, 3, 5, 8, 13, 21, 34};
  int n_trees_max = 500;
  double learning_rate = 0.1;
  int patience = 20;
  double validation_fraction = 0.10;
  int permutation_repeats = 10;
  std::uint64_t seed = 20240601;
  std::size_t min_leaf_rows = 20;
  int n_bins = 256;
  std::size_t min_rows = 50;
  /// Caps whose validation MSE is within this fraction of the best count.
  double mse_tolerance = 0.10;
  /// Minimum relative drop of the best cap's validation MSE below the
  /// constant model's; smaller gains count as no signal.
  double min_gain = 0.05;

  /// Throws ConfigError naming the `surrogate.<key>` at fault.
  void validate() const;
};

/// Row-major feature matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  [[nodiscard]] const double* row(std::size_t r) const { return data.data() + r * cols; }
};

/// Per-feature quantile bin edges. Value v falls in bin
/// #{edges < v}, so bin <= b exactly when v <= edges[b].
struct FeatureBins {
  std::vector<std::vector<double>> edges;

  static FeatureBins fit(const Matrix& x, int max_bins);
  [[nodiscard]] std::uint8_t bin(std::size_t feature, double v) const;
  /// Column-major binned copy of `x`.
  [[nodiscard]] std::vector<std::uint8_t> transform(const Matrix& x) const;
};

struct TreeNode {
  int feature = -1;            ///< -1 for leaves
  std::uint8_t bin = 0;        ///< go left when binned value <= bin
  double threshold = 0.0;      ///< same split on raw values: left when v <= threshold
  int left = -1;
  int right = -1;
  double value = 0.0;          ///< leaf output (already scaled by the learning rate)
};

struct Tree {
  std::vector<TreeNode> nodes;

  [[nodiscard]] double predict(const double* row) const;
  /// `binned` is column-major with `n_rows` rows.
  [[nodiscard]] double predict_binned(const std::uint8_t* binned, std::size_t n_rows, std::size_t row) const;
  [[nodiscard]] std::size_t leaf_count() const;
  [[nodiscard]] bool uses_feature(int feature) const;
};

struct GbrtModel {
  double base = 0.0;
  std::vector<Tree> trees;
  FeatureBins bins;
  std::vector<double> val_mse;   ///< after 0, 1, ... trees, as trained
  std::size_t best_iteration = 0;

  [[nodiscard]] double predict(const double* row) const;
  [[nodiscard]] std::vector<double> predict(const Matrix& x) const;
};

/// Squared-error gradient boosting with best-first, leaf-capped trees and
/// early stopping on the validation set. The model keeps the trees up to
/// the best validation iteration. Requires at least cfg.min_rows training rows.
GbrtModel fit_gbrt(const Matrix& x_train, std::span<const double> y_train, const Matrix& x_val,
                   std::span<const double> y_val, int max_leaves, const SurrogateConfig& cfg);

double mean_squared_error(std::span<const double> pred, std::span<const double> y);

/// Mean increase in MSE over cfg.permutation_repeats seeded shuffles of
/// each column of `x`.
std::vector<double> permutation_importance(const GbrtModel& model, const Matrix& x,
                                           std::span<const double> y, const SurrogateConfig& cfg);

/// 1 + number of other features with importance >= importance[feature].
int importance_rank(std::span<const double> importance, std::size_t feature);

/// Regression rows for one bit: features are the treatment slots followed
/// by the unit's covariates; `group` holds the unit id for splitting.
struct SurrogateData {
  Matrix x;
  std::vector<double> y;
  std::vector<int> group;
  std::vector<double> dose;
  std::size_t treatment_feature = 0;
  std::vector<std::string> feature_names;
};

SurrogateData build_surrogate_data(std::span<const ObservableRecord> records,
                                   const std::vector<std::vector<double>>& covariates, int n_bits,
                                   int bit, Observable observable,
                                   std::optional<int> stratum = std::nullopt);

/// Splits rows so that a seeded cfg.validation_fraction of units is held out.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
Split split_by_group(std::span<const int> group, const SurrogateConfig& cfg);

struct CapResult {
  int max_leaves = 0;
  double val_mse = 0.0;
  std::size_t n_trees = 0;
  int treatment_rank = 0;
  double treatment_importance = 0.0;
  std::string top_feature;
  bool treatment_top = false;
  bool qualifying = false;  ///< val MSE within tolerance of the best cap
};

struct ScanResult {
  int bit = 0;
  std::string observable;
  std::string stratum = "all";
  std::size_t rows = 0;
  std::vector<CapResult> caps;
  bool consistent = false;
  int best_cap = 0;
  /// Validation MSE of the constant (zero-tree) model.
  double constant_mse = 0.0;
  /// 1 - best cap's validation MSE / constant_mse.
  double gain = 0.0;
  /// Per-dose mean of the best cap's predictions against the empirical mean.
  std::vector<double> doses;
  std::vector<double> empirical_mean;
  std::vector<double> predicted_mean;
};

/// Fits every cap of the grid on `data` and applies the consistency rule.
ScanResult consistency_scan(const SurrogateData& data, const SurrogateConfig& cfg);

}  // namespace cdev
