#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cdev {

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double v);

/// Strict parse of a full token; throws ConfigError naming `what`.
double parse_double(std::string_view s, std::string_view what);
long long parse_int(std::string_view s, std::string_view what);
std::vector<double> parse_double_list(std::string_view s, std::string_view what);

/// Flat UTF-8 `key=value` document. Blank lines and lines starting with
/// '#' are ignored; keys keep insertion order.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string_view source = "<text>");
  static KeyValues load(const std::filesystem::path& path);

  void set(std::string key, std::string value);
  void set(std::string key, double value) { set(std::move(key), format_double(value)); }
  [[nodiscard]] std::optional<std::string> get(std::string_view key) const;
  [[nodiscard]] bool contains(std::string_view key) const { return get(key).has_value(); }
  [[nodiscard]] const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

  [[nodiscard]] std::string to_string() const;
  void save(const std::filesystem::path& path) const;

  // Typed lookups that fall back to `def` when the key is missing.
  [[nodiscard]] double get_double(std::string_view key, double def) const;
  [[nodiscard]] long long get_int(std::string_view key, long long def) const;
  [[nodiscard]] std::string get_string(std::string_view key, std::string def) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace cdev
