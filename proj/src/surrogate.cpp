#include "cdev/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <queue>
#include <set>

#include "cdev/causal.hpp"
#include "cdev/error.hpp"
#include "cdev/parallel.hpp"
#include "cdev/synthgen.hpp"

namespace cdev {
namespace {

struct BinStat {
  double sum = 0.0;
  std::uint32_t count = 0;
};

using Histogram = std::vector<BinStat>;  // feature-major, n_bins per feature

struct SplitChoice {
  double gain = 0.0;
  int feature = -1;
  std::uint8_t bin = 0;
};

struct Leaf {
  int node = 0;
  std::vector<std::uint32_t> rows;
  Histogram hist;
  double sum = 0.0;
  SplitChoice split;
};

class TreeGrower {
 public:
  TreeGrower(const std::vector<std::uint8_t>& binned, std::size_t n_rows, std::size_t n_features,
             std::size_t n_bins, std::size_t min_leaf)
      : binned_(binned), n_rows_(n_rows), n_features_(n_features), n_bins_(n_bins), min_leaf_(min_leaf) {}

  Tree grow(const std::vector<double>& residual, int max_leaves, double lr,
            const std::vector<std::vector<double>>& edges) {
    Tree tree;
    std::vector<Leaf> open;
    Leaf root;
    root.rows.resize(n_rows_);
    std::iota(root.rows.begin(), root.rows.end(), 0U);
    root.hist = build(root.rows, residual);
    for (auto r : root.rows) root.sum += residual[r];
    tree.nodes.emplace_back();
    root.split = best_split(root);
    open.push_back(std::move(root));

    int leaves = 1;
    while (leaves < max_leaves) {
      // Best-first: the open leaf with the largest gain; ties go to the
      // earliest node.
      std::size_t pick = open.size();
      for (std::size_t i = 0; i < open.size(); ++i) {
        if (open[i].split.feature < 0) continue;
        if (pick == open.size() || open[i].split.gain > open[pick].split.gain) pick = i;
      }
      if (pick == open.size()) break;
      Leaf parent = std::move(open[pick]);
      open.erase(open.begin() + static_cast<std::ptrdiff_t>(pick));

      const auto f = static_cast<std::size_t>(parent.split.feature);
      const std::uint8_t* col = binned_.data() + f * n_rows_;
      Leaf left;
      Leaf right;
      for (auto r : parent.rows) {
        if (col[r] <= parent.split.bin) {
          left.rows.push_back(r);
          left.sum += residual[r];
        } else {
          right.rows.push_back(r);
          right.sum += residual[r];
        }
      }
      Leaf& small = left.rows.size() <= right.rows.size() ? left : right;
      Leaf& large = left.rows.size() <= right.rows.size() ? right : left;
      small.hist = build(small.rows, residual);
      large.hist = std::move(parent.hist);
      for (std::size_t i = 0; i < large.hist.size(); ++i) {
        large.hist[i].sum -= small.hist[i].sum;
        large.hist[i].count -= small.hist[i].count;
      }

      TreeNode& node = tree.nodes[static_cast<std::size_t>(parent.node)];
      node.feature = parent.split.feature;
      node.bin = parent.split.bin;
      node.threshold = edges[f][parent.split.bin];
      left.node = static_cast<int>(tree.nodes.size());
      right.node = left.node + 1;
      tree.nodes[static_cast<std::size_t>(parent.node)].left = left.node;
      tree.nodes[static_cast<std::size_t>(parent.node)].right = right.node;
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      left.split = best_split(left);
      right.split = best_split(right);
      open.push_back(std::move(left));
      open.push_back(std::move(right));
      ++leaves;
    }
    for (const auto& leaf : open) {
      tree.nodes[static_cast<std::size_t>(leaf.node)].value =
          lr * leaf.sum / static_cast<double>(leaf.rows.size());
    }
    return tree;
  }

 private:
  Histogram build(const std::vector<std::uint32_t>& rows, const std::vector<double>& residual) const {
    Histogram h(n_features_ * n_bins_);
    for (std::size_t f = 0; f < n_features_; ++f) {
      const std::uint8_t* col = binned_.data() + f * n_rows_;
      BinStat* hf = h.data() + f * n_bins_;
      for (auto r : rows) {
        hf[col[r]].sum += residual[r];
        ++hf[col[r]].count;
      }
    }
    return h;
  }

  SplitChoice best_split(const Leaf& leaf) const {
    SplitChoice best;
    const double n = static_cast<double>(leaf.rows.size());
    if (leaf.rows.size() < 2 * min_leaf_) return best;
    const double parent_score = leaf.sum * leaf.sum / n;
    for (std::size_t f = 0; f < n_features_; ++f) {
      const BinStat* hf = leaf.hist.data() + f * n_bins_;
      double sum_left = 0.0;
      std::size_t n_left = 0;
      for (std::size_t b = 0; b + 1 < n_bins_; ++b) {
        sum_left += hf[b].sum;
        n_left += hf[b].count;
        if (hf[b].count == 0) continue;
        if (n_left < min_leaf_) continue;
        const std::size_t n_right = leaf.rows.size() - n_left;
        if (n_right < min_leaf_) break;
        const double sum_right = leaf.sum - sum_left;
        const double gain = sum_left * sum_left / static_cast<double>(n_left) +
                            sum_right * sum_right / static_cast<double>(n_right) - parent_score;
        if (gain > best.gain * (1.0 + 1e-12) + 1e-12) {
          best.gain = gain;
          best.feature = static_cast<int>(f);
          best.bin = static_cast<std::uint8_t>(b);
        }
      }
    }
    return best;
  }

  const std::vector<std::uint8_t>& binned_;
  std::size_t n_rows_;
  std::size_t n_features_;
  std::size_t n_bins_;
  std::size_t min_leaf_;
};

void shuffle(std::vector<std::uint8_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.next() % i;
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<double> subset(std::span<const double> v, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

Matrix subset_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), x.cols);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(x.row(idx[r]), x.cols, out.data.data() + r * x.cols);
  }
  return out;
}

}  // namespace

void SurrogateConfig::validate() const {
  if (max_leaves_grid.empty()) throw ConfigError("surrogate.max_leaves_grid: must not be empty");
  for (int l : max_leaves_grid) {
    if (l < 2) throw ConfigError("surrogate.max_leaves_grid: leaf caps must be >= 2");
  }
  if (n_trees_max < 1) throw ConfigError("surrogate.n_trees_max: must be >= 1");
  if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw ConfigError("surrogate.learning_rate: must lie in (0, 1]");
  if (patience < 1) throw ConfigError("surrogate.patience: must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("surrogate.validation_fraction: must lie in (0, 1)");
  }
  if (permutation_repeats < 1) throw ConfigError("surrogate.permutation_repeats: must be >= 1");
  if (min_leaf_rows < 1) throw ConfigError("surrogate.min_leaf_rows: must be >= 1");
  if (n_bins < 2 || n_bins > 256) throw ConfigError("surrogate.n_bins: must lie in [2, 256]");
  if (!(mse_tolerance >= 0.0)) throw ConfigError("surrogate.mse_tolerance: must be >= 0");
  if (!(min_gain >= 0.0 && min_gain < 1.0)) throw ConfigError("surrogate.min_gain: must lie in [0, 1)");
}

FeatureBins FeatureBins::fit(const Matrix& x, int max_bins) {
  FeatureBins fb;
  fb.edges.resize(x.cols);
  std::vector<double> col(x.rows);
  for (std::size_t f = 0; f < x.cols; ++f) {
    for (std::size_t r = 0; r < x.rows; ++r) col[r] = x.at(r, f);
    std::sort(col.begin(), col.end());
    std::vector<double> uniq;
    for (double v : col) {
      if (uniq.empty() || v != uniq.back()) uniq.push_back(v);
    }
    auto& e = fb.edges[f];
    if (uniq.size() <= static_cast<std::size_t>(max_bins)) {
      for (std::size_t i = 0; i + 1 < uniq.size(); ++i) e.push_back(0.5 * (uniq[i] + uniq[i + 1]));
    } else {
      for (int b = 1; b < max_bins; ++b) {
        const std::size_t pos = col.size() * static_cast<std::size_t>(b) / static_cast<std::size_t>(max_bins);
        const double v = col[std::min(pos, col.size() - 1)];
        if (v >= col.back()) break;
        if (e.empty() || v > e.back()) e.push_back(v);
      }
    }
    // The last bin must stay addressable as a threshold for the split
    // search, which never splits past the final edge.
    if (e.empty()) e.push_back(uniq.empty() ? 0.0 : uniq.front());
  }
  return fb;
}

std::uint8_t FeatureBins::bin(std::size_t feature, double v) const {
  const auto& e = edges[feature];
  return static_cast<std::uint8_t>(std::lower_bound(e.begin(), e.end(), v) - e.begin());
}

std::vector<std::uint8_t> FeatureBins::transform(const Matrix& x) const {
  std::vector<std::uint8_t> out(x.rows * x.cols);
  for (std::size_t f = 0; f < x.cols; ++f) {
    for (std::size_t r = 0; r < x.rows; ++r) out[f * x.rows + r] = bin(f, x.at(r, f));
  }
  return out;
}

double Tree::predict(const double* row) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(row[n.feature] <= n.threshold ? n.left : n.right);
  }
  return nodes[i].value;
}

double Tree::predict_binned(const std::uint8_t* binned, std::size_t n_rows, std::size_t row) const {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    const auto& n = nodes[i];
    const std::uint8_t b = binned[static_cast<std::size_t>(n.feature) * n_rows + row];
    i = static_cast<std::size_t>(b <= n.bin ? n.left : n.right);
  }
  return nodes[i].value;
}

std::size_t Tree::leaf_count() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.feature < 0; }));
}

bool Tree::uses_feature(int feature) const {
  return std::any_of(nodes.begin(), nodes.end(), [&](const TreeNode& n) { return n.feature == feature; });
}

double GbrtModel::predict(const double* row) const {
  double p = base;
  for (const auto& t : trees) p += t.predict(row);
  return p;
}

std::vector<double> GbrtModel::predict(const Matrix& x) const {
  std::vector<double> out(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) out[r] = predict(x.row(r));
  return out;
}

double mean_squared_error(std::span<const double> pred, std::span<const double> y) {
  if (pred.size() != y.size() || y.empty()) throw DataError("MSE needs equal, non-empty inputs");
  NeumaierSum s;
  for (std::size_t i = 0; i < y.size(); ++i) s.add((pred[i] - y[i]) * (pred[i] - y[i]));
  return s.value() / static_cast<double>(y.size());
}

GbrtModel fit_gbrt(const Matrix& x_train, std::span<const double> y_train, const Matrix& x_val,
                   std::span<const double> y_val, int max_leaves, const SurrogateConfig& cfg) {
  cfg.validate();
  if (max_leaves < 2) throw ConfigError("max_leaves: must be >= 2");
  if (x_train.rows != y_train.size() || x_val.rows != y_val.size()) throw DataError("row count mismatch");
  if (x_train.rows < cfg.min_rows) {
    throw DataError("need at least " + std::to_string(cfg.min_rows) + " training rows");
  }
  if (x_val.rows == 0) throw DataError("validation set is empty");
  if (x_val.cols != x_train.cols) throw DataError("feature count mismatch");
  for (double v : x_train.data) {
    if (!std::isfinite(v)) throw DataError("features must be finite");
  }

  GbrtModel model;
  NeumaierSum mean;
  for (double v : y_train) mean.add(v);
  model.base = mean.value() / static_cast<double>(y_train.size());
  model.bins = FeatureBins::fit(x_train, cfg.n_bins);
  const auto binned = model.bins.transform(x_train);
  const auto binned_val = model.bins.transform(x_val);

  std::vector<double> pred(y_train.size(), model.base);
  std::vector<double> pred_val(y_val.size(), model.base);
  std::vector<double> residual(y_train.size());
  model.val_mse.push_back(mean_squared_error(pred_val, y_val));
  double best = model.val_mse.back();

  TreeGrower grower(binned, x_train.rows, x_train.cols, static_cast<std::size_t>(cfg.n_bins),
                    cfg.min_leaf_rows);
  std::vector<Tree> trees;
  for (int it = 1; it <= cfg.n_trees_max; ++it) {
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = y_train[i] - pred[i];
    Tree tree = grower.grow(residual, max_leaves, cfg.learning_rate, model.bins.edges);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pred[i] += tree.predict_binned(binned.data(), x_train.rows, i);
    }
    for (std::size_t i = 0; i < pred_val.size(); ++i) {
      pred_val[i] += tree.predict_binned(binned_val.data(), x_val.rows, i);
    }
    trees.push_back(std::move(tree));
    model.val_mse.push_back(mean_squared_error(pred_val, y_val));
    if (model.val_mse.back() < best) {
      best = model.val_mse.back();
      model.best_iteration = static_cast<std::size_t>(it);
    } else if (static_cast<std::size_t>(it) - model.best_iteration >= static_cast<std::size_t>(cfg.patience)) {
      break;
    }
  }
  trees.resize(model.best_iteration);
  model.trees = std::move(trees);
  return model;
}

std::vector<double> permutation_importance(const GbrtModel& model, const Matrix& x,
                                           std::span<const double> y, const SurrogateConfig& cfg) {
  if (x.rows != y.size() || x.rows == 0) throw DataError("row count mismatch");
  const std::size_t n = x.rows;
  auto binned = model.bins.transform(x);

  // Per-tree contributions let each permutation recompute only the trees
  // that split on the permuted feature.
  std::vector<std::vector<double>> contrib(model.trees.size(), std::vector<double>(n));
  std::vector<double> pred(n, model.base);
  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      contrib[t][i] = model.trees[t].predict_binned(binned.data(), n, i);
      pred[i] += contrib[t][i];
    }
  }
  const double base_mse = mean_squared_error(pred, y);

  std::vector<double> importance(x.cols, 0.0);
  const Rng root(cfg.seed);
  std::vector<double> permuted_pred(n);
  for (std::size_t f = 0; f < x.cols; ++f) {
    std::vector<std::size_t> users;
    for (std::size_t t = 0; t < model.trees.size(); ++t) {
      if (model.trees[t].uses_feature(static_cast<int>(f))) users.push_back(t);
    }
    if (users.empty()) continue;
    const std::vector<std::uint8_t> original(binned.begin() + static_cast<std::ptrdiff_t>(f * n),
                                             binned.begin() + static_cast<std::ptrdiff_t>((f + 1) * n));
    NeumaierSum total;
    for (int rep = 0; rep < cfg.permutation_repeats; ++rep) {
      Rng rng = root.fork((static_cast<std::uint64_t>(f) << 20) ^ static_cast<std::uint64_t>(rep));
      std::vector<std::uint8_t> col = original;
      shuffle(col, rng);
      std::copy(col.begin(), col.end(), binned.begin() + static_cast<std::ptrdiff_t>(f * n));
      permuted_pred = pred;
      for (auto t : users) {
        for (std::size_t i = 0; i < n; ++i) {
          permuted_pred[i] += model.trees[t].predict_binned(binned.data(), n, i) - contrib[t][i];
        }
      }
      total.add(mean_squared_error(permuted_pred, y) - base_mse);
    }
    std::copy(original.begin(), original.end(), binned.begin() + static_cast<std::ptrdiff_t>(f * n));
    importance[f] = total.value() / cfg.permutation_repeats;
  }
  return importance;
}

int importance_rank(std::span<const double> importance, std::size_t feature) {
  int rank = 1;
  for (std::size_t j = 0; j < importance.size(); ++j) {
    if (j != feature && importance[j] >= importance[feature]) ++rank;
  }
  return rank;
}

SurrogateData build_surrogate_data(std::span<const ObservableRecord> records,
                                   const std::vector<std::vector<double>>& covariates, int n_bits,
                                   int bit, Observable observable, std::optional<int> stratum) {
  if (bit < 0 || bit >= n_bits) throw ConfigError("bit: outside [0, n_bits)");
  if (covariates.empty()) throw ConfigError("covariates are required");
  const std::size_t dim = covariates.front().size();
  SurrogateData d;
  d.treatment_feature = static_cast<std::size_t>(bit);
  for (int b = 0; b < n_bits; ++b) d.feature_names.push_back("t" + std::to_string(b));
  for (std::size_t j = 0; j < dim; ++j) d.feature_names.push_back("x" + std::to_string(j));

  std::vector<const ObservableRecord*> rows;
  for (const auto& r : records) {
    if (r.bit != bit) continue;
    if (stratum && r.n_clicks != *stratum) continue;
    if (!r.value(observable)) continue;
    if (r.unit_id < 0 || static_cast<std::size_t>(r.unit_id) >= covariates.size()) {
      throw DataError("unit " + std::to_string(r.unit_id) + " has no covariates");
    }
    rows.push_back(&r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ObservableRecord* a, const ObservableRecord* b) {
    if (a->unit_id != b->unit_id) return a->unit_id < b->unit_id;
    return a->dose < b->dose;
  });
  d.x = Matrix(rows.size(), static_cast<std::size_t>(n_bits) + dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = *rows[i];
    d.x.at(i, static_cast<std::size_t>(bit)) = r.dose;
    const auto& xs = covariates[static_cast<std::size_t>(r.unit_id)];
    for (std::size_t j = 0; j < dim; ++j) d.x.at(i, static_cast<std::size_t>(n_bits) + j) = xs[j];
    d.y.push_back(*r.value(observable));
    d.group.push_back(r.unit_id);
    d.dose.push_back(r.dose);
  }
  return d;
}

Split split_by_group(std::span<const int> group, const SurrogateConfig& cfg) {
  std::vector<int> units(group.begin(), group.end());
  std::sort(units.begin(), units.end());
  units.erase(std::unique(units.begin(), units.end()), units.end());
  Rng rng = Rng(cfg.seed).fork(0x5eed);
  for (std::size_t i = units.size(); i > 1; --i) std::swap(units[i - 1], units[rng.next() % i]);
  auto n_val = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(units.size())));
  n_val = std::clamp<std::size_t>(n_val, units.empty() ? 0 : 1, units.size() > 1 ? units.size() - 1 : 0);
  const std::set<int> held(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(n_val));
  Split s;
  for (std::size_t i = 0; i < group.size(); ++i) (held.count(group[i]) ? s.val : s.train).push_back(i);
  return s;
}

ScanResult consistency_scan(const SurrogateData& data, const SurrogateConfig& cfg) {
  cfg.validate();
  ScanResult res;
  res.rows = data.y.size();
  const Split split = split_by_group(data.group, cfg);
  if (split.train.size() < cfg.min_rows || split.val.empty()) {
    throw DataError("too few rows for a surrogate fit (" + std::to_string(res.rows) + ")");
  }
  const Matrix x_train = subset_rows(data.x, split.train);
  const Matrix x_val = subset_rows(data.x, split.val);
  const auto y_train = subset(data.y, split.train);
  const auto y_val = subset(data.y, split.val);

  const std::size_t n_caps = cfg.max_leaves_grid.size();
  std::vector<GbrtModel> models(n_caps);
  std::vector<CapResult> caps(n_caps);
  parallel_for(n_caps, [&](std::size_t c) {
    const int leaves = cfg.max_leaves_grid[c];
    models[c] = fit_gbrt(x_train, y_train, x_val, y_val, leaves, cfg);
    const auto imp = permutation_importance(models[c], x_val, y_val, cfg);
    CapResult& r = caps[c];
    r.max_leaves = leaves;
    r.val_mse = models[c].val_mse[models[c].best_iteration];
    r.n_trees = models[c].trees.size();
    r.treatment_rank = importance_rank(imp, data.treatment_feature);
    r.treatment_importance = imp[data.treatment_feature];
    const auto top = static_cast<std::size_t>(std::max_element(imp.begin(), imp.end()) - imp.begin());
    r.top_feature = imp[top] > 0.0 ? data.feature_names[top] : "none";
    r.treatment_top = r.treatment_rank == 1 && r.treatment_importance > 0.0;
  });

  std::size_t best = 0;
  for (std::size_t c = 1; c < n_caps; ++c) {
    if (caps[c].val_mse < caps[best].val_mse) best = c;
  }
  res.best_cap = caps[best].max_leaves;
  res.constant_mse = models[best].val_mse.front();
  res.gain = res.constant_mse > 0.0 ? 1.0 - caps[best].val_mse / res.constant_mse : 0.0;
  res.consistent = res.gain >= cfg.min_gain;
  for (auto& c : caps) {
    c.qualifying = c.val_mse <= caps[best].val_mse * (1.0 + cfg.mse_tolerance);
    if (c.qualifying && !c.treatment_top) res.consistent = false;
  }
  res.caps = std::move(caps);

  const auto pred = models[best].predict(data.x);
  std::map<double, std::pair<NeumaierSum, NeumaierSum>> by_dose;
  std::map<double, std::size_t> counts;
  for (std::size_t i = 0; i < data.y.size(); ++i) {
    by_dose[data.dose[i]].first.add(data.y[i]);
    by_dose[data.dose[i]].second.add(pred[i]);
    ++counts[data.dose[i]];
  }
  for (const auto& [dose, sums] : by_dose) {
    const double n = static_cast<double>(counts[dose]);
    res.doses.push_back(dose);
    res.empirical_mean.push_back(sums.first.value() / n);
    res.predicted_mean.push_back(sums.second.value() / n);
  }
  return res;
}

}  // namespace cdev
