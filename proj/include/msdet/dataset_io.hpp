#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msdet/data.hpp"

namespace msdet {

namespace fs = std::filesystem;

// Raw plane: text header "W H\n", then W·H int16 little-endian.
std::string encode_raw(const Plane16& p);
Plane16 decode_raw(std::string_view bytes);

// Binary PGM (P5, maxval 255).
std::string encode_pgm(const Plane8& p);
Plane8 decode_pgm(std::string_view bytes);

// One "class cx cy w h" line per box, six decimals.
std::string format_labels(const std::vector<GroundTruth>& boxes);
std::vector<GroundTruth> parse_labels(std::string_view text);

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, std::string_view bytes);

void write_raw(const fs::path& path, const Plane16& p);
Plane16 read_raw(const fs::path& path);
void write_pgm(const fs::path& path, const Plane8& p);
Plane8 read_pgm(const fs::path& path);
void write_labels(const fs::path& path, const std::vector<GroundTruth>& boxes);
std::vector<GroundTruth> read_labels(const fs::path& path);

/// Writes <stem>.raw, <stem>.pgm and <stem>.txt under dir.
void write_sample(const fs::path& dir, const std::string& stem, const Sample& s);
Sample read_sample(const fs::path& dir, const std::string& stem);

struct ManifestEntry {
  fs::path image;
  fs::path labels;
};

/// "image<TAB>labels" per line; relative paths resolve against the manifest's
/// directory.
void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const fs::path& path);

struct Dataset {
  std::vector<Plane8> images;
  std::vector<std::vector<GroundTruth>> labels;

  std::size_t size() const { return images.size(); }
};

/// Loads every manifest entry; images may be .pgm (preprocessed) or .raw
/// (preprocessed on load).
Dataset load_dataset(const fs::path& manifest);

/// Generates n scenes with per-sample seeds derived from spec.seed, writes
/// them under dir and returns the manifest entries (relative paths).
std::vector<ManifestEntry> generate_dataset(const fs::path& dir, const std::string& prefix, std::size_t n,
                                            const SceneSpec& spec);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace msdet
