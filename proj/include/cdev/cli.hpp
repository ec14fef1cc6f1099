#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cdev/corpus.hpp"
#include "cdev/report.hpp"
#include "cdev/surrogate.hpp"

namespace cdev {

/// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;

/// Manifest plus estimator and surrogate settings, read from one flat
/// key=value document. `profile=test` lowers the default n_units to 250.
struct ExperimentConfig {
  Manifest manifest;
  EstimateOptions estimate;
  SurrogateConfig surrogate;

  static ExperimentConfig from_kv(const KeyValues& kv);
};

/// Covariates for a measured corpus, regenerated from its manifest.
std::vector<std::vector<double>> manifest_covariates(const Manifest& m);

/// Spectra sidecar path used by `measure --spectra` for a given CSV.
std::filesystem::path spectra_sidecar_path(const std::filesystem::path& csv);

/// Parses `args` (without the program name) and runs one subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cdev
