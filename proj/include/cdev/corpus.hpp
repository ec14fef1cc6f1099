#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdev/keyvalue.hpp"
#include "cdev/observables.hpp"
#include "cdev/synthgen.hpp"

namespace cdev {

enum class GeneratorKind { kBuiltin, kExternal };

/// -1.0 to 12.5 in steps of 0.5 (28 levels).
std::vector<double> default_dose_grid();

/// Experiment description stored as `manifest.txt` in every corpus.
struct Manifest {
  static constexpr int kSchemaVersion = 1;
  static constexpr const char* kFileName = "manifest.txt";

  int schema_version = kSchemaVersion;
  int sample_rate = 32000;
  std::size_t clip_len = 65536;
  int n_units = 2500;
  int n_bits = 5;
  int covariate_dim = 95;
  std::uint64_t covariate_seed = 1;
  std::vector<double> dose_grid = default_dose_grid();
  GeneratorKind generator = GeneratorKind::kBuiltin;
  MeasureConfig measure;
  GeneratorConfig synth;
  PlantedEncoding encoding = PlantedEncoding::defaults(5);

  /// Throws ConfigError naming the offending key.
  void validate() const;
  [[nodiscard]] GeneratorConfig generator_config() const;

  [[nodiscard]] KeyValues to_kv() const;
  /// Missing keys keep their defaults. Unknown keys raise ConfigError,
  /// except those under `estimate.` and `surrogate.`, which belong to the
  /// experiment config and are ignored here.
  static Manifest from_kv(const KeyValues& kv);
  static Manifest load(const std::filesystem::path& path);
};

// --- WAV ------------------------------------------------------------------

/// 16-bit PCM mono RIFF/WAVE. Samples are scaled by 32768, rounded and
/// clamped to the int16 range.
void write_wav(const AudioClip& clip, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_wav(const AudioClip& clip);

/// Accepts only PCM (format 1), mono, 16-bit. FormatError names the
/// offending chunk; truncated files raise IoError.
AudioClip read_wav(const std::filesystem::path& path);
AudioClip decode_wav(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>");

// --- Layout ---------------------------------------------------------------

struct ClipKey {
  int unit_id = 0;
  int bit = 0;
  double dose = 0.0;
};

/// unit{id:05}_bit{b}_t{dose:+08.3f}.wav, e.g. unit00007_bit1_t+012.500.wav.
std::string clip_filename(const ClipKey& key);
std::optional<ClipKey> parse_clip_filename(const std::string& name);

/// Treatment vector with `dose` on `bit` and zeros elsewhere.
std::vector<double> treatment_vector(int n_bits, int bit, double dose);

struct GenerateSummary {
  std::size_t files = 0;
  std::size_t degenerate = 0;
  std::filesystem::path manifest_path;
};

/// Writes one WAV per (unit, bit, dose) plus the manifest. Refuses a
/// non-empty directory unless `overwrite` is set (IoError).
GenerateSummary generate_corpus(const Manifest& manifest, const std::filesystem::path& dir,
                                bool overwrite = false);

struct SkippedFile {
  std::string name;
  std::string reason;
};

struct MeasureSummary {
  Manifest manifest;
  bool manifest_found = true;             ///< false: defaults were used
  std::vector<ObservableRecord> records;  ///< sorted by (bit, dose, unit_id); spectra dropped
  std::vector<SkippedFile> skipped;
  std::size_t wav_files = 0;              ///< candidate .wav files seen
};

/// Receives each measured record, spectrum included, in (bit, dose,
/// unit_id) order.
using RecordSink = std::function<void(const ObservableRecord&)>;

/// Measures every WAV in a corpus directory with the manifest's config.
/// Files are processed one (bit, dose) batch at a time so coda spectra
/// never accumulate in memory; they are only computed when `sink` is set.
MeasureSummary measure_corpus(const std::filesystem::path& dir, const RecordSink& sink = {});

/// Orders records by (bit, dose, unit_id).
void sort_records(std::vector<ObservableRecord>& records);

// --- CSV ------------------------------------------------------------------

inline constexpr const char* kObservablesHeader =
    "unit_id,bit,dose,n_clicks,mean_ici,std_ici,spectral_mean_hz,spectral_mean_std_hz,"
    "coda_spectral_mean_hz";

std::string observables_csv(const std::vector<ObservableRecord>& records);
void write_observables_csv(const std::vector<ObservableRecord>& records,
                           const std::filesystem::path& path);
/// Throws ConfigError listing missing columns; DataError on bad rows.
std::vector<ObservableRecord> read_observables_csv(const std::filesystem::path& path);

inline constexpr const char* kSpectraHeader = "bit,dose,unit_id,bin_index,power";

/// Streaming writer for the spectra sidecar (bit,dose,unit_id,bin_index,power).
class SpectraCsvWriter {
 public:
  explicit SpectraCsvWriter(const std::filesystem::path& path);
  ~SpectraCsvWriter();
  SpectraCsvWriter(const SpectraCsvWriter&) = delete;
  SpectraCsvWriter& operator=(const SpectraCsvWriter&) = delete;

  /// Records without a coda spectrum write nothing.
  void write(const ObservableRecord& record);
  void close();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Splits a CSV line on commas (RFC-4180 quoting supported).
std::vector<std::string> split_csv_line(const std::string& line);

// --- In-memory experiment ---------------------------------------------------

struct DoseKey {
  int bit = 0;
  double dose = 0.0;
  auto operator<=>(const DoseKey&) const = default;
};

/// Unit-averaged normalized coda spectrum for one (bit, dose).
struct SpectrumAverage {
  std::optional<Spectrum> spectrum;  ///< renormalized to unit mass
  int n_units = 0;                   ///< units with a non-silent spectrum
};

using SpectrumGrid = std::map<DoseKey, SpectrumAverage>;

/// Running sum of normalized spectra; add in a fixed order for
/// reproducible output.
class SpectrumAccumulator {
 public:
  void add(const Spectrum& s);
  [[nodiscard]] SpectrumAverage average() const;

 private:
  std::vector<double> freqs_;
  std::vector<double> sum_;
  int count_ = 0;
};

/// Streams a spectra sidecar and averages it per (bit, dose). Bin
/// frequencies follow from `sample_rate` and the bin count.
SpectrumGrid read_spectra_csv(const std::filesystem::path& path, int sample_rate);

struct ExperimentResult {
  std::vector<std::vector<double>> covariates;
  std::vector<ObservableRecord> records;  ///< sorted; spectra dropped
  SpectrumGrid spectra;
  std::size_t degenerate = 0;
};

/// Generates and measures the builtin corpus without touching disk.
ExperimentResult run_experiment(const Manifest& manifest);

}  // namespace cdev
