#include "msdet/config_text.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace msdet {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
  throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                    c == '.' || c == '-' || c == '\'';
    if (!ok) return false;
  }
  return true;
}

}  // namespace

std::optional<std::string> LayerRecord::field(std::string_view name) const {
  for (const auto& [k, v] : fields) {
    if (k == name) return v;
  }
  return std::nullopt;
}

std::optional<std::string> ConfigDoc::get(std::string_view key) const {
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) {
    if (it->first == key) return it->second;
  }
  return std::nullopt;
}

void ConfigDoc::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : keys) {
    if (k == key) {
      v = value;
      return;
    }
  }
  keys.emplace_back(key, value);
}

double ConfigDoc::get_double(std::string_view key, double fallback) const {
  auto v = get(key);
  return v ? parse_double(*v, key) : fallback;
}

long ConfigDoc::get_int(std::string_view key, long fallback) const {
  auto v = get(key);
  return v ? parse_int(*v, key) : fallback;
}

bool ConfigDoc::get_bool(std::string_view key, bool fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("key '" + std::string(key) + "': expected a boolean, got '" + *v + "'");
}

std::string ConfigDoc::get_string(std::string_view key, const std::string& fallback) const {
  auto v = get(key);
  return v ? *v : fallback;
}

void ConfigDoc::require_known(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : keys) {
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
}

ConfigDoc parse_config(std::string_view text) {
  ConfigDoc doc;
  doc.source = std::string(text);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    auto words = split_ws(line);
    if (words[0] == "layer") {
      if (words.size() < 2) fail(line_no, "layer record needs a kind");
      LayerRecord rec;
      rec.line = line_no;
      rec.kind = std::string(words[1]);
      for (std::size_t i = 2; i < words.size(); ++i) {
        auto eq = words[i].find('=');
        if (eq == std::string_view::npos || eq == 0 || eq + 1 == words[i].size()) {
          fail(line_no, "malformed layer field '" + std::string(words[i]) + "', expected name=value");
        }
        std::string name(words[i].substr(0, eq));
        if (rec.field(name)) fail(line_no, "duplicate layer field '" + name + "'");
        rec.fields.emplace_back(std::move(name), std::string(words[i].substr(eq + 1)));
      }
      doc.layers.push_back(std::move(rec));
    } else if (words[0] == "tap") {
      if (words.size() < 2 || words.size() > 3 || !valid_name(words[1])) fail(line_no, "expected 'tap <name> [at=N]'");
      TapRecord tap;
      tap.line = line_no;
      tap.name = std::string(words[1]);
      tap.layer = static_cast<long>(doc.layers.size()) - 1;
      if (words.size() == 3) {
        if (words[2].substr(0, 3) != "at=") fail(line_no, "expected 'at=N' after tap name");
        try {
          tap.layer = parse_int(words[2].substr(3), "tap index");
        } catch (const ConfigError& e) {
          fail(line_no, e.what());
        }
      }
      for (const auto& t : doc.taps) {
        if (t.name == tap.name) fail(line_no, "duplicate tap '" + tap.name + "'");
      }
      doc.taps.push_back(std::move(tap));
    } else {
      auto eq = line.find('=');
      if (eq == std::string_view::npos) fail(line_no, "expected 'key = value', 'layer ...' or 'tap ...'");
      std::string_view key = trim(line.substr(0, eq));
      std::string_view value = trim(line.substr(eq + 1));
      if (!valid_name(key)) fail(line_no, "invalid key '" + std::string(key) + "'");
      if (value.empty()) fail(line_no, "empty value for key '" + std::string(key) + "'");
      doc.set(std::string(key), std::string(value));
    }
    if (end == text.size()) break;
  }
  return doc;
}

ConfigDoc load_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

double parse_double(std::string_view text, std::string_view what) {
  const std::string s(trim(text));
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size()) {
    throw ConfigError(std::string(what) + ": expected a number, got '" + s + "'");
  }
  return v;
}

long parse_int(std::string_view text, std::string_view what) {
  text = trim(text);
  long v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(std::string(what) + ": expected an integer, got '" + std::string(text) + "'");
  }
  return v;
}

std::vector<long> parse_int_list(std::string_view text, std::string_view what) {
  std::vector<long> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    out.push_back(parse_int(text.substr(pos, comma - pos), what));
    pos = comma + 1;
  }
  return out;
}

std::vector<double> parse_double_list(std::string_view text, std::string_view what) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    out.push_back(parse_double(text.substr(pos, comma - pos), what));
    pos = comma + 1;
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace msdet
