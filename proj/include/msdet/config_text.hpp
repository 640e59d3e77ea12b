#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace msdet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Structured text shared by architecture and run configs:
//
//   # comment
//   key = value
//   layer <kind> field=value field=value ...
//   tap <name> [at=<layer index>]
//
// A tap without `at=` names the output of the most recent layer (or the
// network input when no layer precedes it).
struct LayerRecord {
  std::size_t line = 0;
  std::string kind;
  std::vector<std::pair<std::string, std::string>> fields;

  std::optional<std::string> field(std::string_view name) const;
};

struct TapRecord {
  std::size_t line = 0;
  std::string name;
  long layer = -1;  // -1 = network input
};

struct ConfigDoc {
  std::vector<std::pair<std::string, std::string>> keys;
  std::vector<LayerRecord> layers;
  std::vector<TapRecord> taps;
  std::string source;  // original text, for hashing and manifests

  std::optional<std::string> get(std::string_view key) const;
  bool has(std::string_view key) const { return get(key).has_value(); }
  void set(const std::string& key, const std::string& value);

  double get_double(std::string_view key, double fallback) const;
  long get_int(std::string_view key, long fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::string get_string(std::string_view key, const std::string& fallback) const;

  /// Throws on any key outside `allowed`.
  void require_known(const std::set<std::string>& allowed) const;
};

ConfigDoc parse_config(std::string_view text);
ConfigDoc load_config(const std::filesystem::path& path);

double parse_double(std::string_view text, std::string_view what);
long parse_int(std::string_view text, std::string_view what);
std::vector<long> parse_int_list(std::string_view text, std::string_view what);
std::vector<double> parse_double_list(std::string_view text, std::string_view what);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace msdet
