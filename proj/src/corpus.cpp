#include "cdev/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "cdev/error.hpp"
#include "cdev/parallel.hpp"

namespace cdev {
namespace fs = std::filesystem;

namespace {

// --- manifest field tables --------------------------------------------------

struct DoubleField {
  const char* key;
  double GeneratorConfig::*member;
};

constexpr DoubleField kSynthDoubles[] = {
    {"unit_click_offset", &GeneratorConfig::unit_click_offset},
    {"base_ici_s", &GeneratorConfig::base_ici_s},
    {"ici_unit_spread", &GeneratorConfig::ici_unit_spread},
    {"ici_cv", &GeneratorConfig::ici_cv},
    {"ici_step", &GeneratorConfig::ici_step},
    {"ici_std_step", &GeneratorConfig::ici_std_step},
    {"min_gap_s", &GeneratorConfig::min_gap_s},
    {"onset_min_s", &GeneratorConfig::onset_min_s},
    {"onset_max_s", &GeneratorConfig::onset_max_s},
    {"tail_s", &GeneratorConfig::tail_s},
    {"base_carrier_hz", &GeneratorConfig::base_carrier_hz},
    {"carrier_unit_spread_hz", &GeneratorConfig::carrier_unit_spread_hz},
    {"carrier_step_hz", &GeneratorConfig::carrier_step_hz},
    {"jitter_hz", &GeneratorConfig::jitter_hz},
    {"jitter_step", &GeneratorConfig::jitter_step},
    {"jitter_floor", &GeneratorConfig::jitter_floor},
    {"carrier_min_hz", &GeneratorConfig::carrier_min_hz},
    {"carrier_max_hz", &GeneratorConfig::carrier_max_hz},
    {"decay_s", &GeneratorConfig::decay_s},
    {"attack_s", &GeneratorConfig::attack_s},
    {"amp_min", &GeneratorConfig::amp_min},
    {"amp_max", &GeneratorConfig::amp_max},
    {"click_amp_spread", &GeneratorConfig::click_amp_spread},
    {"noise_base", &GeneratorConfig::noise_base},
    {"noise_max", &GeneratorConfig::noise_max},
};

struct DetectorField {
  const char* key;
  double DetectorConfig::*member;
};

constexpr DetectorField kDetectorDoubles[] = {
    {"band_low_hz", &DetectorConfig::band_low_hz},
    {"band_high_hz", &DetectorConfig::band_high_hz},
    {"min_separation_s", &DetectorConfig::min_separation_s},
    {"rel_threshold", &DetectorConfig::rel_threshold},
    {"abs_floor_factor", &DetectorConfig::abs_floor_factor},
    {"envelope_window_ms", &DetectorConfig::envelope_window_ms},
};

constexpr const char* kBitFields[] = {"target", "slope", "entangled_target", "entangled_amp",
                                      "noise_coeff"};

std::uint64_t parse_u64(std::string_view s, std::string_view what) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || end != s.data() + s.size()) {
    throw ConfigError(std::string(what) + ": not an unsigned integer: '" + std::string(s) + "'");
  }
  return v;
}

int to_int(long long v, std::string_view key) {
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ConfigError(std::string(key) + ": out of range");
  }
  return static_cast<int>(v);
}

std::string observable_or_none(const std::optional<Observable>& o) {
  return o ? std::string(observable_name(*o)) : "none";
}

std::optional<Observable> parse_target(const std::string& s, const std::string& key) {
  if (s == "none" || s.empty()) return std::nullopt;
  auto o = parse_observable(s);
  if (!o) throw ConfigError(key + ": unknown observable '" + s + "'");
  return o;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

// --- little-endian helpers --------------------------------------------------

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_tag(std::vector<std::uint8_t>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const fs::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("write failed: " + path.string());
}

std::string format_optional(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

bool record_less(const ObservableRecord& a, const ObservableRecord& b) {
  if (a.bit != b.bit) return a.bit < b.bit;
  if (a.dose != b.dose) return a.dose < b.dose;
  return a.unit_id < b.unit_id;
}

}  // namespace

std::vector<double> default_dose_grid() {
  std::vector<double> grid;
  for (int k = -2; k <= 25; ++k) grid.push_back(0.5 * k);
  return grid;
}

// --- Manifest ---------------------------------------------------------------

void Manifest::validate() const {
  if (schema_version != kSchemaVersion) {
    throw ConfigError("schema_version: unsupported value " + std::to_string(schema_version));
  }
  if (sample_rate <= 0) throw ConfigError("sample_rate: must be positive");
  if (clip_len < 2) throw ConfigError("clip_len: must be at least 2");
  if (n_units <= 0) throw ConfigError("n_units: must be positive");
  if (n_bits <= 0 || n_bits > 64) throw ConfigError("n_bits: must lie in [1, 64]");
  if (covariate_dim <= 0) throw ConfigError("covariate_dim: must be positive");
  if (dose_grid.empty()) throw ConfigError("dose_grid: must not be empty");
  std::set<std::string> names;
  for (std::size_t i = 0; i < dose_grid.size(); ++i) {
    const double d = dose_grid[i];
    if (!std::isfinite(d) || std::abs(d) >= 1000.0) {
      throw ConfigError("dose_grid: values must be finite with |dose| < 1000");
    }
    if (i > 0 && !(d > dose_grid[i - 1])) throw ConfigError("dose_grid: must be strictly increasing");
    if (!names.insert(clip_filename({0, 0, d})).second) {
      throw ConfigError("dose_grid: doses closer than 0.001 collide in file names");
    }
  }
  measure.detector.validate(sample_rate);
  if (measure.observables.click_window_samples < 2) {
    throw ConfigError("observables.click_window_samples: must be at least 2");
  }
  if (generator == GeneratorKind::kBuiltin) {
    if (static_cast<int>(encoding.bits.size()) != n_bits) {
      throw ConfigError("n_bits: planted encoding has " + std::to_string(encoding.bits.size()) + " bits");
    }
    encoding.validate();
    generator_config().validate();
  }
}

GeneratorConfig Manifest::generator_config() const {
  GeneratorConfig g = synth;
  g.sample_rate = sample_rate;
  g.clip_len = clip_len;
  return g;
}

KeyValues Manifest::to_kv() const {
  KeyValues kv;
  kv.set("schema_version", std::to_string(schema_version));
  kv.set("sample_rate", std::to_string(sample_rate));
  kv.set("clip_len", std::to_string(clip_len));
  kv.set("n_units", std::to_string(n_units));
  kv.set("n_bits", std::to_string(n_bits));
  kv.set("covariate_dim", std::to_string(covariate_dim));
  kv.set("covariate_seed", std::to_string(covariate_seed));
  std::string grid;
  for (double d : dose_grid) {
    if (!grid.empty()) grid += ',';
    grid += format_double(d);
  }
  kv.set("dose_grid", grid);
  kv.set("generator", generator == GeneratorKind::kBuiltin ? "builtin" : "external");

  const auto& det = measure.detector;
  for (const auto& f : kDetectorDoubles) kv.set(std::string("detector.") + f.key, det.*f.member);
  kv.set("detector.max_candidates", std::to_string(det.max_candidates));
  kv.set("detector.per_group_peaks", std::to_string(det.per_group_peaks));
  kv.set("observables.click_window_samples", std::to_string(measure.observables.click_window_samples));

  if (generator == GeneratorKind::kBuiltin) {
    kv.set("planted.base_clicks", std::to_string(synth.base_clicks));
    for (const auto& f : kSynthDoubles) kv.set(std::string("planted.") + f.key, synth.*f.member);
    for (std::size_t b = 0; b < encoding.bits.size(); ++b) {
      const auto& e = encoding.bits[b];
      const std::string p = "planted.bit" + std::to_string(b) + ".";
      kv.set(p + "target", observable_or_none(e.target));
      kv.set(p + "slope", e.slope);
      kv.set(p + "entangled_target", observable_or_none(e.entangled_target));
      kv.set(p + "entangled_amp", e.entangled_amp);
      kv.set(p + "noise_coeff", e.noise_coeff);
    }
  }
  return kv;
}

Manifest Manifest::from_kv(const KeyValues& kv) {
  Manifest m;
  std::set<std::string> known;
  auto take = [&](const std::string& key) {
    known.insert(key);
    return kv.get(key);
  };

  if (auto v = take("schema_version")) m.schema_version = to_int(parse_int(*v, "schema_version"), "schema_version");
  if (auto v = take("sample_rate")) m.sample_rate = to_int(parse_int(*v, "sample_rate"), "sample_rate");
  if (auto v = take("clip_len")) {
    const long long n = parse_int(*v, "clip_len");
    if (n < 2) throw ConfigError("clip_len: must be at least 2");
    m.clip_len = static_cast<std::size_t>(n);
  }
  if (auto v = take("n_units")) m.n_units = to_int(parse_int(*v, "n_units"), "n_units");
  if (auto v = take("n_bits")) m.n_bits = to_int(parse_int(*v, "n_bits"), "n_bits");
  if (auto v = take("covariate_dim")) m.covariate_dim = to_int(parse_int(*v, "covariate_dim"), "covariate_dim");
  if (auto v = take("covariate_seed")) m.covariate_seed = parse_u64(*v, "covariate_seed");
  if (auto v = take("dose_grid")) m.dose_grid = parse_double_list(*v, "dose_grid");
  if (auto v = take("generator")) {
    if (*v == "builtin") {
      m.generator = GeneratorKind::kBuiltin;
    } else if (*v == "external") {
      m.generator = GeneratorKind::kExternal;
    } else {
      throw ConfigError("generator: expected builtin or external, got '" + *v + "'");
    }
  }

  auto& det = m.measure.detector;
  for (const auto& f : kDetectorDoubles) {
    const std::string key = std::string("detector.") + f.key;
    if (auto v = take(key)) det.*f.member = parse_double(*v, key);
  }
  auto read_count = [&](const std::string& key, std::size_t& out) {
    if (auto v = take(key)) {
      const long long n = parse_int(*v, key);
      if (n < 1) throw ConfigError(key + ": must be positive");
      out = static_cast<std::size_t>(n);
    }
  };
  read_count("detector.max_candidates", det.max_candidates);
  read_count("detector.per_group_peaks", det.per_group_peaks);
  read_count("observables.click_window_samples", m.measure.observables.click_window_samples);

  if (m.n_bits <= 0 || m.n_bits > 64) throw ConfigError("n_bits: must lie in [1, 64]");
  if (m.n_bits >= 4) {
    m.encoding = PlantedEncoding::defaults(m.n_bits);
  } else {
    m.encoding.bits.assign(static_cast<std::size_t>(m.n_bits), BitEffect{});
  }
  if (auto v = take("planted.base_clicks")) {
    m.synth.base_clicks = to_int(parse_int(*v, "planted.base_clicks"), "planted.base_clicks");
  }
  for (const auto& f : kSynthDoubles) {
    const std::string key = std::string("planted.") + f.key;
    if (auto v = take(key)) m.synth.*f.member = parse_double(*v, key);
  }

  static const std::regex bit_key(R"(planted\.bit(\d+)\.([a-z_]+))");
  for (const auto& [key, value] : kv.entries()) {
    std::smatch match;
    if (!std::regex_match(key, match, bit_key)) continue;
    known.insert(key);
    const long long b = parse_int(match[1].str(), key);
    if (b >= m.n_bits) throw ConfigError(key + ": bit index outside n_bits");
    auto& e = m.encoding.bits[static_cast<std::size_t>(b)];
    const std::string field = match[2].str();
    if (field == "target") {
      e.target = parse_target(value, key);
    } else if (field == "slope") {
      e.slope = parse_double(value, key);
    } else if (field == "entangled_target") {
      e.entangled_target = parse_target(value, key);
    } else if (field == "entangled_amp") {
      e.entangled_amp = parse_double(value, key);
    } else if (field == "noise_coeff") {
      e.noise_coeff = parse_double(value, key);
    } else {
      std::string allowed;
      for (const char* f : kBitFields) allowed += std::string(allowed.empty() ? "" : ", ") + f;
      throw ConfigError(key + ": unknown field (expected one of " + allowed + ")");
    }
  }

  for (const auto& [key, value] : kv.entries()) {
    if (known.count(key) || starts_with(key, "estimate.") || starts_with(key, "surrogate.")) continue;
    throw ConfigError(key + ": unknown key");
  }
  m.validate();
  return m;
}

Manifest Manifest::load(const fs::path& path) { return from_kv(KeyValues::load(path)); }

// --- WAV ----------------------------------------------------------------------

std::vector<std::uint8_t> encode_wav(const AudioClip& clip) {
  if (clip.sample_rate <= 0) throw DataError("sample rate must be positive");
  const std::size_t data_bytes = clip.samples.size() * 2;
  if (data_bytes > 0xffffffffULL - 36) throw DataError("clip too long for a WAV file");
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, static_cast<std::uint32_t>(36 + data_bytes));
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, static_cast<std::uint32_t>(data_bytes));
  for (double v : clip.samples) {
    if (!std::isfinite(v)) throw DataError("non-finite sample");
    const double q = std::clamp(std::nearbyint(v * 32768.0), -32768.0, 32767.0);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

void write_wav(const AudioClip& clip, const fs::path& path) {
  const auto bytes = encode_wav(clip);
  write_file(path, bytes.data(), bytes.size());
}

AudioClip decode_wav(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  const std::size_t n = bytes.size();
  if (n < 12) throw IoError(name + ": truncated RIFF header");
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0) throw FormatError(name + ": RIFF: missing RIFF tag");
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) throw FormatError(name + ": RIFF: form type is not WAVE");

  bool have_fmt = false;
  AudioClip clip;
  std::size_t pos = 12;
  while (true) {
    if (pos + 8 > n) {
      if (!have_fmt) throw FormatError(name + ": fmt : chunk missing");
      throw FormatError(name + ": data: chunk missing");
    }
    const std::string tag(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    const std::uint32_t size = get_u32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (tag == "fmt ") {
      if (size < 16 || body + size > n) throw IoError(name + ": fmt : chunk truncated");
      const std::uint16_t format = get_u16(bytes.data() + body);
      const std::uint16_t channels = get_u16(bytes.data() + body + 2);
      const std::uint32_t rate = get_u32(bytes.data() + body + 4);
      const std::uint16_t bits = get_u16(bytes.data() + body + 14);
      if (format != 1) {
        throw FormatError(name + ": fmt : format tag " + std::to_string(format) + " is not PCM (1)");
      }
      if (channels != 1) {
        throw FormatError(name + ": fmt : " + std::to_string(channels) + " channels, expected mono");
      }
      if (bits != 16) throw FormatError(name + ": fmt : " + std::to_string(bits) + " bits per sample, expected 16");
      if (rate == 0 || rate > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
        throw FormatError(name + ": fmt : invalid sample rate");
      }
      clip.sample_rate = static_cast<int>(rate);
      have_fmt = true;
    } else if (tag == "data") {
      if (!have_fmt) throw FormatError(name + ": data: chunk precedes fmt ");
      if (body + size > n) throw IoError(name + ": data: chunk truncated");
      if (size % 2 != 0) throw FormatError(name + ": data: odd byte count for 16-bit samples");
      if (size == 0) throw FormatError(name + ": data: no samples");
      clip.samples.resize(size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto raw = static_cast<std::int16_t>(get_u16(bytes.data() + body + 2 * i));
        clip.samples[i] = raw / 32768.0;
      }
      return clip;
    }
    pos = body + size + (size & 1U);
  }
}

AudioClip read_wav(const fs::path& path) { return decode_wav(read_file(path), path.filename().string()); }

// --- Layout -------------------------------------------------------------------

std::string clip_filename(const ClipKey& key) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "unit%05d_bit%d_t%+08.3f.wav", key.unit_id, key.bit, key.dose);
  return buf;
}

std::optional<ClipKey> parse_clip_filename(const std::string& name) {
  static const std::regex pattern(R"(unit(\d{5,9})_bit(\d{1,2})_t([+-]\d+\.\d+)\.wav)");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) return std::nullopt;
  ClipKey key;
  key.unit_id = std::stoi(m[1].str());
  key.bit = std::stoi(m[2].str());
  key.dose = parse_double(m[3].str(), "dose");
  // Normalize -0.000 to 0.
  if (key.dose == 0.0) key.dose = 0.0;
  return key;
}

std::vector<double> treatment_vector(int n_bits, int bit, double dose) {
  if (bit < 0 || bit >= n_bits) throw ConfigError("bit index outside n_bits");
  std::vector<double> t(static_cast<std::size_t>(n_bits), 0.0);
  t[static_cast<std::size_t>(bit)] = dose;
  return t;
}

GenerateSummary generate_corpus(const Manifest& manifest, const fs::path& dir, bool overwrite) {
  manifest.validate();
  if (manifest.generator != GeneratorKind::kBuiltin) {
    throw ConfigError("generator: only builtin corpora can be generated");
  }
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw IoError(dir.string() + ": exists and is not a directory");
    if (!fs::is_empty(dir, ec)) {
      if (!overwrite) throw IoError(dir.string() + ": directory is not empty (use overwrite)");
      // Drop stale clips from an earlier run; other files are left alone.
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && parse_clip_filename(entry.path().filename().string())) {
          fs::remove(entry.path(), ec);
          if (ec) throw IoError("cannot remove " + entry.path().string());
        }
      }
    }
  } else {
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  }

  const auto xs = draw_covariates(manifest.covariate_seed, manifest.n_units, manifest.covariate_dim);
  const GeneratorConfig gen = manifest.generator_config();
  const std::size_t n_doses = manifest.dose_grid.size();
  const std::size_t per_unit = static_cast<std::size_t>(manifest.n_bits) * n_doses;
  const std::size_t total = xs.size() * per_unit;
  std::atomic<std::size_t> degenerate{0};
  parallel_for(total, [&](std::size_t i) {
    const std::size_t unit = i / per_unit;
    const int bit = static_cast<int>((i % per_unit) / n_doses);
    const double dose = manifest.dose_grid[i % n_doses];
    const LatentInput in{xs[unit], treatment_vector(manifest.n_bits, bit, dose)};
    const auto out = synth_coda(in, manifest.encoding, gen);
    if (out.planted.degenerate) ++degenerate;
    write_wav(out.clip, dir / clip_filename({static_cast<int>(unit), bit, dose}));
  });

  GenerateSummary summary;
  summary.files = total;
  summary.degenerate = degenerate.load();
  summary.manifest_path = dir / Manifest::kFileName;
  manifest.to_kv().save(summary.manifest_path);
  return summary;
}

void sort_records(std::vector<ObservableRecord>& records) {
  std::stable_sort(records.begin(), records.end(), record_less);
}

MeasureSummary measure_corpus(const fs::path& dir, const RecordSink& sink) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError(dir.string() + ": not a directory");
  MeasureSummary summary;
  const fs::path manifest_path = dir / Manifest::kFileName;
  if (fs::exists(manifest_path, ec)) {
    summary.manifest = Manifest::load(manifest_path);
  } else {
    summary.manifest_found = false;
    summary.manifest.generator = GeneratorKind::kExternal;
  }
  MeasureConfig cfg = summary.manifest.measure;
  cfg.observables.keep_spectrum = static_cast<bool>(sink);

  struct Item {
    ClipKey key;
    fs::path path;
  };
  std::vector<Item> items;
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() != ".wav") continue;
    paths.push_back(entry.path());
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(paths.begin(), paths.end());
  summary.wav_files = paths.size();
  for (const auto& p : paths) {
    const std::string name = p.filename().string();
    auto key = parse_clip_filename(name);
    if (!key) {
      summary.skipped.push_back({name, "unparseable file name"});
    } else if (summary.manifest_found && key->bit >= summary.manifest.n_bits) {
      summary.skipped.push_back({name, "bit index outside n_bits"});
    } else {
      items.push_back({*key, p});
    }
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.key.bit != b.key.bit) return a.key.bit < b.key.bit;
    if (a.key.dose != b.key.dose) return a.key.dose < b.key.dose;
    return a.key.unit_id < b.key.unit_id;
  });

  std::size_t start = 0;
  while (start < items.size()) {
    std::size_t stop = start + 1;
    while (stop < items.size() && items[stop].key.bit == items[start].key.bit &&
           items[stop].key.dose == items[start].key.dose) {
      ++stop;
    }
    const std::size_t count = stop - start;
    std::vector<std::optional<ObservableRecord>> out(count);
    std::vector<std::string> errors(count);
    parallel_for(count, [&](std::size_t j) {
      const Item& it = items[start + j];
      try {
        const AudioClip clip = read_wav(it.path);
        out[j] = measure(clip, it.key.unit_id, it.key.bit, it.key.dose, cfg);
      } catch (const std::exception& e) {
        errors[j] = e.what();
      }
    });
    for (std::size_t j = 0; j < count; ++j) {
      if (!out[j]) {
        summary.skipped.push_back({items[start + j].path.filename().string(), errors[j]});
        continue;
      }
      if (sink) sink(*out[j]);
      out[j]->coda_spectrum.reset();
      summary.records.push_back(std::move(*out[j]));
    }
    start = stop;
  }
  return summary;
}

// --- CSV ----------------------------------------------------------------------

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string observables_csv(const std::vector<ObservableRecord>& records) {
  std::string out = kObservablesHeader;
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.unit_id);
    out += ',';
    out += std::to_string(r.bit);
    out += ',';
    out += format_double(r.dose);
    out += ',';
    out += std::to_string(r.n_clicks);
    for (const auto* v : {&r.mean_ici, &r.std_ici, &r.spectral_mean_hz, &r.spectral_mean_std_hz,
                          &r.coda_spectral_mean_hz}) {
      out += ',';
      out += format_optional(*v);
    }
    out += '\n';
  }
  return out;
}

void write_observables_csv(const std::vector<ObservableRecord>& records, const fs::path& path) {
  const std::string text = observables_csv(records);
  write_file(path, text.data(), text.size());
}

std::vector<ObservableRecord> read_observables_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": missing header row");
  const auto header = split_csv_line(line);
  const auto required = split_csv_line(kObservablesHeader);
  std::vector<std::size_t> index(required.size());
  std::string missing;
  for (std::size_t c = 0; c < required.size(); ++c) {
    auto it = std::find(header.begin(), header.end(), required[c]);
    if (it == header.end()) {
      missing += (missing.empty() ? "" : ", ") + required[c];
    } else {
      index[c] = static_cast<std::size_t>(it - header.begin());
    }
  }
  if (!missing.empty()) throw ConfigError(path.string() + ": missing columns: " + missing);

  std::vector<ObservableRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    if (f.size() != header.size()) throw DataError(where + ": expected " + std::to_string(header.size()) + " fields");
    auto field = [&](std::size_t c) -> const std::string& { return f[index[c]]; };
    auto opt = [&](std::size_t c) -> std::optional<double> {
      if (field(c).empty()) return std::nullopt;
      const double v = parse_double(field(c), where + " " + required[c]);
      if (!std::isfinite(v)) throw DataError(where + ": non-finite " + required[c]);
      return v;
    };
    try {
      ObservableRecord r;
      r.unit_id = to_int(parse_int(field(0), "unit_id"), "unit_id");
      r.bit = to_int(parse_int(field(1), "bit"), "bit");
      r.dose = parse_double(field(2), "dose");
      r.n_clicks = to_int(parse_int(field(3), "n_clicks"), "n_clicks");
      if (r.unit_id < 0 || r.bit < 0 || r.n_clicks < 0 || !std::isfinite(r.dose)) {
        throw DataError("negative index or non-finite dose");
      }
      r.mean_ici = opt(4);
      r.std_ici = opt(5);
      r.spectral_mean_hz = opt(6);
      r.spectral_mean_std_hz = opt(7);
      r.coda_spectral_mean_hz = opt(8);
      records.push_back(std::move(r));
    } catch (const ConfigError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return records;
}

struct SpectraCsvWriter::Impl {
  std::ofstream out;
  fs::path path;
};

SpectraCsvWriter::SpectraCsvWriter(const fs::path& path) : impl_(std::make_unique<Impl>()) {
  impl_->path = path;
  impl_->out.open(path, std::ios::binary | std::ios::trunc);
  if (!impl_->out) throw IoError("cannot write " + path.string());
  impl_->out << kSpectraHeader << '\n';
}

SpectraCsvWriter::~SpectraCsvWriter() = default;

void SpectraCsvWriter::write(const ObservableRecord& r) {
  if (!r.coda_spectrum) return;
  const std::string prefix =
      std::to_string(r.bit) + ',' + format_double(r.dose) + ',' + std::to_string(r.unit_id) + ',';
  std::string buf;
  const auto& power = r.coda_spectrum->power;
  for (std::size_t i = 0; i < power.size(); ++i) {
    buf += prefix;
    buf += std::to_string(i);
    buf += ',';
    buf += format_double(power[i]);
    buf += '\n';
  }
  impl_->out << buf;
  if (!impl_->out) throw IoError("write failed: " + impl_->path.string());
}

void SpectraCsvWriter::close() {
  impl_->out.close();
  if (!impl_->out) throw IoError("write failed: " + impl_->path.string());
}

void SpectrumAccumulator::add(const Spectrum& s) {
  if (sum_.empty()) {
    freqs_ = s.bin_freqs;
    sum_.assign(s.size(), 0.0);
  } else if (s.size() != sum_.size()) {
    throw DataError("spectra with different bin counts cannot be averaged");
  }
  for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += s.power[i];
  ++count_;
}

SpectrumAverage SpectrumAccumulator::average() const {
  SpectrumAverage avg;
  avg.n_units = count_;
  if (count_ == 0) return avg;
  double total = 0.0;
  for (double v : sum_) total += v;
  if (!(total > 0.0)) return avg;
  Spectrum s;
  s.bin_freqs = freqs_;
  s.power.resize(sum_.size());
  for (std::size_t i = 0; i < sum_.size(); ++i) s.power[i] = sum_[i] / total;
  avg.spectrum = std::move(s);
  return avg;
}

SpectrumGrid read_spectra_csv(const fs::path& path, int sample_rate) {
  if (sample_rate <= 0) throw ConfigError("sample_rate: must be positive");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != split_csv_line(kSpectraHeader)) {
    throw ConfigError(path.string() + ": expected header " + kSpectraHeader);
  }

  std::map<DoseKey, SpectrumAccumulator> acc;
  std::optional<std::pair<DoseKey, int>> current;
  std::vector<double> power;
  auto flush = [&] {
    if (!current || power.empty()) return;
    Spectrum s;
    const std::size_t bins = power.size();
    const double nfft = bins > 1 ? 2.0 * static_cast<double>(bins - 1) : 1.0;
    s.bin_freqs.resize(bins);
    for (std::size_t i = 0; i < bins; ++i) s.bin_freqs[i] = static_cast<double>(i) * sample_rate / nfft;
    s.power = std::move(power);
    acc[current->first].add(s);
    power.clear();
  };

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    if (f.size() != 5) throw DataError(where + ": expected 5 fields");
    try {
      const DoseKey key{to_int(parse_int(f[0], "bit"), "bit"), parse_double(f[1], "dose")};
      const int unit = to_int(parse_int(f[2], "unit_id"), "unit_id");
      const long long bin = parse_int(f[3], "bin_index");
      const double p = parse_double(f[4], "power");
      if (!current || current->first != key || current->second != unit) {
        flush();
        current = {key, unit};
      }
      if (bin != static_cast<long long>(power.size())) throw DataError("bins out of order");
      if (!std::isfinite(p) || p < 0.0) throw DataError("power must be finite and >= 0");
      power.push_back(p);
    } catch (const ConfigError& e) {
      throw DataError(where + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  flush();
  SpectrumGrid grid;
  for (const auto& [key, a] : acc) grid[key] = a.average();
  return grid;
}

// --- In-memory experiment -------------------------------------------------------

ExperimentResult run_experiment(const Manifest& manifest) {
  manifest.validate();
  if (manifest.generator != GeneratorKind::kBuiltin) {
    throw ConfigError("generator: in-memory runs need the builtin generator");
  }
  ExperimentResult result;
  result.covariates = draw_covariates(manifest.covariate_seed, manifest.n_units, manifest.covariate_dim);
  const GeneratorConfig gen = manifest.generator_config();
  MeasureConfig cfg = manifest.measure;
  cfg.observables.keep_spectrum = true;
  const std::size_t n_units = result.covariates.size();
  result.records.reserve(n_units * manifest.dose_grid.size() * static_cast<std::size_t>(manifest.n_bits));

  for (int bit = 0; bit < manifest.n_bits; ++bit) {
    for (double dose : manifest.dose_grid) {
      const auto t = treatment_vector(manifest.n_bits, bit, dose);
      std::vector<ObservableRecord> batch(n_units);
      std::vector<char> degenerate(n_units, 0);
      parallel_for(n_units, [&](std::size_t u) {
        const auto out = synth_coda({result.covariates[u], t}, manifest.encoding, gen);
        degenerate[u] = out.planted.degenerate ? 1 : 0;
        batch[u] = measure(out.clip, static_cast<int>(u), bit, dose, cfg);
      });
      SpectrumAccumulator acc;
      for (std::size_t u = 0; u < n_units; ++u) {
        result.degenerate += static_cast<std::size_t>(degenerate[u]);
        if (batch[u].coda_spectrum) acc.add(*batch[u].coda_spectrum);
        batch[u].coda_spectrum.reset();
        result.records.push_back(std::move(batch[u]));
      }
      result.spectra[{bit, dose}] = acc.average();
    }
  }
  return result;
}

}  // namespace cdev
