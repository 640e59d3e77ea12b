#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "msdet/tensor.hpp"

namespace msdet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using NamedTensors = std::vector<NamedTensor>;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Container layout (little-endian):
//   "MSDT" | u32 version=1 | u32 count |
//   count × { u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload }
std::string serialize_checkpoint(const NamedTensors& tensors);
std::vector<CheckpointEntry> parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into tensors with matching names, widening f32→f64.
/// Every target must be present with an identical shape.
void restore_checkpoint(const std::vector<CheckpointEntry>& entries, NamedTensors& targets);

}  // namespace msdet
