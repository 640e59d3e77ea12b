#include "msdet/dataset_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "msdet/config_text.hpp"

namespace msdet {

namespace {

// Parses "<uint><sep>" at pos; advances past exactly one separator byte.
std::size_t read_header_uint(std::string_view bytes, std::size_t& pos, const char* what, const char* format) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
  if (ec != std::errc() || ptr == bytes.data() + pos) {
    throw DataError(std::string(format) + ": expected " + what + " at byte offset " + std::to_string(pos));
  }
  pos = static_cast<std::size_t>(ptr - bytes.data());
  if (pos >= bytes.size() || (bytes[pos] != ' ' && bytes[pos] != '\n')) {
    throw DataError(std::string(format) + ": expected separator after " + what + " at byte offset " +
                    std::to_string(pos));
  }
  ++pos;
  return v;
}

void check_dims(std::size_t w, std::size_t h, const char* format) {
  if (w == 0 || h == 0 || w > 65536 || h > 65536) {
    throw DataError(std::string(format) + ": invalid dimensions " + std::to_string(w) + "x" + std::to_string(h));
  }
}

}  // namespace

std::string encode_raw(const Plane16& p) {
  std::string out = std::to_string(p.width) + " " + std::to_string(p.height) + "\n";
  out.reserve(out.size() + 2 * p.data.size());
  for (std::int16_t v : p.data) {
    const auto u = static_cast<std::uint16_t>(v);
    out.push_back(static_cast<char>(u & 0xff));
    out.push_back(static_cast<char>(u >> 8));
  }
  return out;
}

Plane16 decode_raw(std::string_view bytes) {
  std::size_t pos = 0;
  const std::size_t w = read_header_uint(bytes, pos, "width", "raw");
  if (bytes[pos - 1] != ' ') throw DataError("raw: expected 'W H' header on one line");
  const std::size_t h = read_header_uint(bytes, pos, "height", "raw");
  if (bytes[pos - 1] != '\n') throw DataError("raw: header must end with a newline");
  check_dims(w, h, "raw");
  const std::size_t need = pos + 2 * w * h;
  if (bytes.size() != need) {
    throw DataError("raw: expected " + std::to_string(need) + " bytes, got " + std::to_string(bytes.size()));
  }
  Plane16 p(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    const auto lo = static_cast<unsigned char>(bytes[pos + 2 * i]);
    const auto hi = static_cast<unsigned char>(bytes[pos + 2 * i + 1]);
    p.data[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  return p;
}

std::string encode_pgm(const Plane8& p) {
  std::string out = "P5\n" + std::to_string(p.width) + " " + std::to_string(p.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(p.data.data()), p.data.size());
  return out;
}

Plane8 decode_pgm(std::string_view bytes) {
  if (bytes.substr(0, 3) != "P5\n") throw DataError("pgm: missing P5 magic at byte offset 0");
  std::size_t pos = 3;
  const std::size_t w = read_header_uint(bytes, pos, "width", "pgm");
  const std::size_t h = read_header_uint(bytes, pos, "height", "pgm");
  const std::size_t maxval = read_header_uint(bytes, pos, "maxval", "pgm");
  if (maxval != 255) throw DataError("pgm: only maxval 255 is supported, got " + std::to_string(maxval));
  check_dims(w, h, "pgm");
  if (bytes.size() != pos + w * h) {
    throw DataError("pgm: expected " + std::to_string(pos + w * h) + " bytes, got " + std::to_string(bytes.size()));
  }
  Plane8 p(w, h);
  for (std::size_t i = 0; i < w * h; ++i) p.data[i] = static_cast<std::uint8_t>(bytes[pos + i]);
  return p;
}

std::string format_labels(const std::vector<GroundTruth>& boxes) {
  std::string out;
  char buf[128];
  for (const auto& g : boxes) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", g.cls, g.box.cx, g.box.cy, g.box.w, g.box.h);
    out += buf;
  }
  return out;
}

std::vector<GroundTruth> parse_labels(std::string_view text) {
  std::vector<GroundTruth> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& m) { throw DataError("labels line " + std::to_string(line_no) + ": " + m); };
    std::istringstream ss(line);
    std::string fields[5], extra;
    for (auto& f : fields) {
      if (!(ss >> f)) fail("expected 'class cx cy w h'");
    }
    if (ss >> extra) fail("trailing field '" + extra + "'");
    GroundTruth g;
    try {
      const long cls = parse_int(fields[0], "class");
      if (cls < 0) fail("negative class");
      g.cls = static_cast<int>(cls);
      g.box = {parse_double(fields[1], "cx"), parse_double(fields[2], "cy"), parse_double(fields[3], "w"),
               parse_double(fields[4], "h")};
    } catch (const ConfigError& e) {
      fail(e.what());
    }
    if (!(g.box.w > 0) || !(g.box.h > 0)) fail("box width and height must be positive");
    for (double v : {g.box.cx, g.box.cy, g.box.w, g.box.h}) {
      if (!(v >= 0.0 && v <= 1.0)) fail("coordinates must be normalized to [0,1]");
    }
    out.push_back(g);
  }
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

template <typename Fn>
auto with_path(const fs::path& path, Fn fn) {
  try {
    return fn();
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_raw(const fs::path& path, const Plane16& p) { write_file(path, encode_raw(p)); }
Plane16 read_raw(const fs::path& path) {
  const std::string bytes = read_file(path);
  return with_path(path, [&] { return decode_raw(bytes); });
}
void write_pgm(const fs::path& path, const Plane8& p) { write_file(path, encode_pgm(p)); }
Plane8 read_pgm(const fs::path& path) {
  const std::string bytes = read_file(path);
  return with_path(path, [&] { return decode_pgm(bytes); });
}
void write_labels(const fs::path& path, const std::vector<GroundTruth>& boxes) {
  write_file(path, format_labels(boxes));
}
std::vector<GroundTruth> read_labels(const fs::path& path) {
  const std::string text = read_file(path);
  return with_path(path, [&] { return parse_labels(text); });
}

void write_sample(const fs::path& dir, const std::string& stem, const Sample& s) {
  write_raw(dir / (stem + ".raw"), s.raw);
  write_pgm(dir / (stem + ".pgm"), s.image);
  write_labels(dir / (stem + ".txt"), s.boxes);
}

Sample read_sample(const fs::path& dir, const std::string& stem) {
  Sample s;
  s.raw = read_raw(dir / (stem + ".raw"));
  s.image = read_pgm(dir / (stem + ".pgm"));
  s.boxes = read_labels(dir / (stem + ".txt"));
  return s;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) out += e.image.generic_string() + "\t" + e.labels.generic_string() + "\n";
  write_file(path, out);
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  const std::string text = read_file(path);
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size() || line.find('\t', tab + 1) != std::string::npos) {
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": expected 'image<TAB>labels'");
    }
    fs::path image = line.substr(0, tab), labels = line.substr(tab + 1);
    if (image.is_relative()) image = base / image;
    if (labels.is_relative()) labels = base / labels;
    out.push_back({image, labels});
  }
  return out;
}

Dataset load_dataset(const fs::path& manifest) {
  Dataset ds;
  for (const auto& e : read_manifest(manifest)) {
    if (e.image.extension() == ".raw") {
      ds.images.push_back(preprocess(read_raw(e.image)));
    } else {
      ds.images.push_back(read_pgm(e.image));
    }
    ds.labels.push_back(read_labels(e.labels));
  }
  if (ds.size() == 0) throw DataError(manifest.string() + ": empty dataset");
  return ds;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer over (base, index)
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::vector<ManifestEntry> generate_dataset(const fs::path& dir, const std::string& prefix, std::size_t n,
                                            const SceneSpec& spec) {
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    SceneSpec s = spec;
    s.seed = derive_seed(spec.seed, i);
    char stem[64];
    std::snprintf(stem, sizeof stem, "%s%04zu", prefix.c_str(), i);
    write_sample(dir, stem, generate_scene(s));
    entries.push_back({std::string(stem) + ".pgm", std::string(stem) + ".txt"});
  }
  return entries;
}

}  // namespace msdet
