#include "msdet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace msdet {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t offset() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at offset " +
                            std::to_string(pos_));
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const NamedTensors& tensors) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    if (nt.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw CheckpointError("tensor name too long: " + nt.name.substr(0, 32) + "...");
    }
    const Shape& shape = nt.tensor.shape();
    if (shape.size() > 255) throw CheckpointError("rank too large for " + nt.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
    out += nt.name;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : nt.tensor.values()) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

std::vector<CheckpointEntry> parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string(kMagic, 4)) throw CheckpointError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t t = 0; t < count; ++t) {
    CheckpointEntry e;
    const auto name_len = r.get<std::uint16_t>("name length");
    e.name = r.take(name_len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank == 0) throw CheckpointError("zero-rank tensor " + e.name);
    std::uint64_t n = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const auto dim = r.get<std::uint32_t>("dims");
      if (dim == 0) throw CheckpointError("zero dimension in tensor " + e.name);
      e.shape.push_back(dim);
      n *= dim;
    }
    if (n * 4 > r.remaining()) {
      throw CheckpointError("payload of " + e.name + " needs " + std::to_string(n * 4) + " bytes, " +
                            std::to_string(r.remaining()) + " remain");
    }
    e.values.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) e.values[i] = std::bit_cast<float>(r.get<std::uint32_t>("payload"));
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) {
    throw CheckpointError(std::to_string(r.remaining()) + " trailing bytes after last tensor");
  }
  return entries;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  const std::string bytes = serialize_checkpoint(tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str());
}

void restore_checkpoint(const std::vector<CheckpointEntry>& entries, NamedTensors& targets) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& t : targets) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint has no tensor named " + t.name);
    if (it->second->shape != t.tensor.shape()) {
      throw CheckpointError("shape mismatch for " + t.name + ": checkpoint " + shape_str(it->second->shape) +
                            " vs model " + shape_str(t.tensor.shape()));
    }
    auto dst = t.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = it->second->values[i];
  }
}

}  // namespace msdet
