#include "cdev/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <ostream>
#include <set>

#include "cdev/error.hpp"
#include "cdev/keyvalue.hpp"

namespace cdev {
namespace fs = std::filesystem;

namespace {

constexpr int kTestProfileUnits = 250;

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

KeyValues load_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv = path.empty() ? KeyValues{} : KeyValues::load(path);
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + item + "'");
    kv.set(item.substr(0, eq), item.substr(eq + 1));
  }
  return kv;
}

std::optional<Manifest> find_manifest(const std::string& flag, const fs::path& csv) {
  if (!flag.empty()) return Manifest::load(flag);
  const fs::path candidate = csv.parent_path() / Manifest::kFileName;
  std::error_code ec;
  if (fs::exists(candidate, ec)) return Manifest::load(candidate);
  return std::nullopt;
}

int cmd_synth(const std::string& config, const std::vector<std::string>& overrides, const std::string& profile,
              const fs::path& out_dir, bool overwrite, std::ostream& out) {
  KeyValues kv = load_config(config, overrides);
  if (!profile.empty()) kv.set("profile", profile);
  const auto cfg = ExperimentConfig::from_kv(kv);
  const auto summary = generate_corpus(cfg.manifest, out_dir, overwrite);
  out << "wrote " << summary.files << " files";
  if (summary.degenerate > 0) out << " (" << summary.degenerate << " degenerate codas)";
  out << "\nmanifest: " << summary.manifest_path.string() << "\n";
  return kExitOk;
}

int cmd_measure(const fs::path& in_dir, const fs::path& out_csv, bool spectra, std::ostream& out,
                std::ostream& err) {
  if (out_csv.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(out_csv.parent_path(), ec);
    if (ec) throw IoError("cannot create " + out_csv.parent_path().string() + ": " + ec.message());
  }
  std::unique_ptr<SpectraCsvWriter> writer;
  const fs::path sidecar = spectra_sidecar_path(out_csv);
  RecordSink sink;
  if (spectra) {
    writer = std::make_unique<SpectraCsvWriter>(sidecar);
    sink = [&](const ObservableRecord& r) { writer->write(r); };
  }
  MeasureSummary summary = measure_corpus(in_dir, sink);
  if (writer) writer->close();

  if (!summary.manifest_found) {
    err << "warning: " << (in_dir / Manifest::kFileName).string()
        << " not found; using default detector settings\n";
  }
  for (const auto& s : summary.skipped) err << "warning: skipped " << s.name << ": " << s.reason << "\n";
  if (summary.wav_files == 0 || 2 * summary.skipped.size() > summary.wav_files) {
    std::error_code ec;
    if (writer) fs::remove(sidecar, ec);
    err << "error: " << summary.skipped.size() << " of " << summary.wav_files << " WAV files skipped\n";
    return kExitIo;
  }
  write_observables_csv(summary.records, out_csv);
  if (summary.manifest_found) {
    const fs::path copy = out_csv.parent_path() / Manifest::kFileName;
    std::error_code ec;
    if (!fs::exists(copy, ec)) summary.manifest.to_kv().save(copy);
  }
  out << "measured " << summary.records.size() << " files, skipped " << summary.skipped.size() << "\n";
  out << "observables: " << out_csv.string() << "\n";
  if (spectra) out << "spectra: " << sidecar.string() << "\n";
  return kExitOk;
}

int cmd_estimate(const fs::path& in_csv, const fs::path& out_dir, const std::string& config,
                 const std::string& manifest_flag, std::optional<double> baseline_clicks,
                 std::optional<double> baseline_spectral, std::optional<double> theta_min, std::ostream& out,
                 std::ostream& err) {
  const auto cfg = ExperimentConfig::from_kv(load_config(config, {}));
  EstimateOptions opts = cfg.estimate;
  if (baseline_clicks) opts.baseline_clicks = *baseline_clicks;
  if (baseline_spectral) opts.baseline_spectral = *baseline_spectral;
  if (theta_min) opts.theta_dose_min = *theta_min;

  const auto records = read_observables_csv(in_csv);
  if (records.empty()) throw DataError(in_csv.string() + ": no rows");
  const auto manifest = find_manifest(manifest_flag, in_csv);
  const int sample_rate = manifest ? manifest->sample_rate : Manifest{}.sample_rate;

  std::optional<SpectrumGrid> spectra;
  const fs::path sidecar = spectra_sidecar_path(in_csv);
  std::error_code ec;
  if (fs::exists(sidecar, ec)) {
    spectra = read_spectra_csv(sidecar, sample_rate);
  } else {
    err << "notice: " << sidecar.string() << " not found; wasserstein.csv left empty\n";
  }
  const auto summary = write_estimates(records, spectra ? &*spectra : nullptr, out_dir, opts);
  out << "wrote " << summary.files.size() << " files to " << out_dir.string() << "\n";
  return kExitOk;
}

int cmd_surrogate(const fs::path& in_csv, int bit, const std::string& observable_text, const fs::path& out_dir,
                  const std::string& config, const std::string& manifest_flag, std::ostream& out,
                  std::ostream& err) {
  const auto cfg = ExperimentConfig::from_kv(load_config(config, {}));
  const auto observable = parse_observable(observable_text);
  if (!observable) throw ConfigError("--observable: unknown observable '" + observable_text + "'");
  const auto records = read_observables_csv(in_csv);
  const auto manifest = find_manifest(manifest_flag, in_csv);
  if (!manifest) {
    throw ConfigError("surrogate needs the corpus manifest for covariates (pass --manifest)");
  }
  if (bit < 0 || bit >= manifest->n_bits) throw ConfigError("--bit: outside [0, n_bits)");
  const auto covariates = manifest_covariates(*manifest);

  std::vector<ScanResult> scans;
  std::vector<std::string> notices;
  auto scan = [&](std::optional<int> stratum) {
    const auto data = build_surrogate_data(records, covariates, manifest->n_bits, bit, *observable, stratum);
    const std::string label = stratum ? std::to_string(*stratum) : "all";
    const auto split = split_by_group(data.group, cfg.surrogate);
    if (split.train.size() < cfg.surrogate.min_rows || split.val.empty()) {
      notices.push_back("stratum " + label + " skipped: " + std::to_string(data.y.size()) + " rows");
      return;
    }
    ScanResult r = consistency_scan(data, cfg.surrogate);
    r.bit = bit;
    r.observable = std::string(observable_name(*observable));
    r.stratum = label;
    scans.push_back(std::move(r));
  };
  scan(std::nullopt);
  if (*observable == Observable::kMeanIci || *observable == Observable::kIciStd) {
    std::set<int> strata;
    for (const auto& r : records) {
      if (r.bit == bit && r.value(*observable)) strata.insert(r.n_clicks);
    }
    for (int k : strata) scan(k);
  }
  if (scans.empty() || scans.front().stratum != "all") {
    throw DataError("too few rows for bit " + std::to_string(bit) + " and " + observable_text);
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_text(out_dir / "surrogate.csv", surrogate_csv(scans));
  write_text(out_dir / "surrogate_summary.txt", surrogate_summary(scans, cfg.surrogate, notices));
  for (const auto& n : notices) err << "notice: " << n << "\n";
  for (const auto& s : scans) {
    out << "bit " << bit << " " << s.observable << " stratum " << s.stratum << ": "
        << (s.consistent ? "CONSISTENT" : "NOT-CONSISTENT") << "\n";
  }
  return kExitOk;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_kv(const KeyValues& kv) {
  ExperimentConfig cfg;
  KeyValues manifest_kv;
  std::string profile = "default";
  for (const auto& [key, value] : kv.entries()) {
    if (key == "profile") {
      profile = value;
    } else if (!starts_with(key, "estimate.") && !starts_with(key, "surrogate.")) {
      manifest_kv.set(key, value);
    }
  }
  if (profile == "test") {
    if (!kv.contains("n_units")) manifest_kv.set("n_units", std::to_string(kTestProfileUnits));
  } else if (profile != "default") {
    throw ConfigError("profile: expected default or test, got '" + profile + "'");
  }
  cfg.manifest = Manifest::from_kv(manifest_kv);

  auto& e = cfg.estimate;
  auto& s = cfg.surrogate;
  for (const auto& [key, value] : kv.entries()) {
    if (key == "estimate.baseline_clicks") {
      e.baseline_clicks = parse_double(value, key);
    } else if (key == "estimate.baseline_spectral") {
      e.baseline_spectral = parse_double(value, key);
    } else if (key == "estimate.theta_dose_min") {
      e.theta_dose_min = parse_double(value, key);
    } else if (key == "surrogate.max_leaves_grid") {
      s.max_leaves_grid.clear();
      for (double v : parse_double_list(value, key)) {
        if (v != std::floor(v)) throw ConfigError(key + ": leaf caps must be integers");
        s.max_leaves_grid.push_back(static_cast<int>(v));
      }
    } else if (key == "surrogate.n_trees_max") {
      s.n_trees_max = static_cast<int>(parse_int(value, key));
    } else if (key == "surrogate.learning_rate") {
      s.learning_rate = parse_double(value, key);
    } else if (key == "surrogate.patience") {
      s.patience = static_cast<int>(parse_int(value, key));
    } else if (key == "surrogate.validation_fraction") {
      s.validation_fraction = parse_double(value, key);
    } else if (key == "surrogate.permutation_repeats") {
      s.permutation_repeats = static_cast<int>(parse_int(value, key));
    } else if (key == "surrogate.seed") {
      const long long v = parse_int(value, key);
      if (v < 0) throw ConfigError(key + ": must be >= 0");
      s.seed = static_cast<std::uint64_t>(v);
    } else if (key == "surrogate.min_leaf_rows") {
      const long long v = parse_int(value, key);
      if (v < 1) throw ConfigError(key + ": must be >= 1");
      s.min_leaf_rows = static_cast<std::size_t>(v);
    } else if (key == "surrogate.min_rows") {
      const long long v = parse_int(value, key);
      if (v < 1) throw ConfigError(key + ": must be >= 1");
      s.min_rows = static_cast<std::size_t>(v);
    } else if (key == "surrogate.n_bins") {
      s.n_bins = static_cast<int>(parse_int(value, key));
    } else if (key == "surrogate.mse_tolerance") {
      s.mse_tolerance = parse_double(value, key);
    } else if (key == "surrogate.min_gain") {
      s.min_gain = parse_double(value, key);
    } else if (starts_with(key, "estimate.") || starts_with(key, "surrogate.")) {
      throw ConfigError(key + ": unknown key");
    }
  }
  s.validate();
  return cfg;
}

std::vector<std::vector<double>> manifest_covariates(const Manifest& m) {
  return draw_covariates(m.covariate_seed, m.n_units, m.covariate_dim);
}

fs::path spectra_sidecar_path(const fs::path& csv) {
  return csv.parent_path() / (csv.stem().string() + "_spectra.csv");
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Causal probing of audio generators: synthesize, measure, estimate, explain."};
  app.name("cdev");
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> overrides;
  std::string profile;
  std::string out_dir;
  bool overwrite = false;
  auto* synth = app.add_subcommand("synth", "Generate a builtin corpus of WAV files plus manifest.txt");
  synth->add_option("--config", config, "key=value experiment config file");
  synth->add_option("--set", overrides, "Override one config key (key=value); repeatable");
  synth->add_option("--profile", profile, "Config profile: default (2500 units) or test (250 units)");
  synth->add_option("--out", out_dir, "Output corpus directory")->required();
  synth->add_flag("--overwrite", overwrite, "Replace clips in a non-empty directory");

  std::string in_path;
  std::string out_path;
  bool spectra = false;
  auto* measure = app.add_subcommand("measure", "Detect clicks and write the observables CSV");
  measure->add_option("--in", in_path, "Corpus directory")->required();
  measure->add_option("--out", out_path, "Observables CSV")->required();
  measure->add_flag("--spectra", spectra, "Also write <out stem>_spectra.csv with coda spectra");

  std::optional<double> baseline_clicks;
  std::optional<double> baseline_spectral;
  std::optional<double> theta_min;
  std::string manifest_flag;
  auto* estimate = app.add_subcommand("estimate", "Causal estimates, summaries and plots");
  estimate->add_option("--in", in_path, "Observables CSV")->required();
  estimate->add_option("--out", out_path, "Report directory")->required();
  estimate->add_option("--baseline-clicks", baseline_clicks, "Baseline dose for click observables (default -1)");
  estimate->add_option("--baseline-spectral", baseline_spectral, "Baseline dose for spectral observables (default 1)");
  estimate->add_option("--theta-min", theta_min, "Lower dose bound of the restricted theta rows (default 1)");
  estimate->add_option("--config", config, "key=value config (estimate.* keys)");
  estimate->add_option("--manifest", manifest_flag, "Manifest (default: manifest.txt beside the CSV)");

  int bit = -1;
  std::string observable;
  auto* surrogate = app.add_subcommand("surrogate", "Boosted-tree consistency scan for one bit");
  surrogate->add_option("--in", in_path, "Observables CSV")->required();
  surrogate->add_option("--bit", bit, "Bit index")->required();
  surrogate->add_option("--observable", observable, "Observable name, e.g. n_clicks")->required();
  surrogate->add_option("--out", out_path, "Report directory")->required();
  surrogate->add_option("--config", config, "key=value config (surrogate.* keys)");
  surrogate->add_option("--manifest", manifest_flag, "Manifest (default: manifest.txt beside the CSV)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
      err << sub->help();
    } else {
      err << app.help();
    }
    return kExitConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(config, overrides, profile, out_dir, overwrite, out);
    if (measure->parsed()) return cmd_measure(in_path, out_path, spectra, out, err);
    if (estimate->parsed()) {
      return cmd_estimate(in_path, out_path, config, manifest_flag, baseline_clicks, baseline_spectral, theta_min,
                          out, err);
    }
    if (surrogate->parsed()) {
      return cmd_surrogate(in_path, bit, observable, out_path, config, manifest_flag, out, err);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitConfig;
}

}  // namespace cdev
