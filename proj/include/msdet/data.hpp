#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "msdet/box.hpp"

namespace msdet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Plane {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<T> data;  // row-major

  Plane() = default;
  Plane(std::size_t w, std::size_t h, T fill = T{}) : width(w), height(h), data(w * h, fill) {}

  T& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
  T at(std::size_t x, std::size_t y) const { return data[y * width + x]; }
  bool operator==(const Plane&) const = default;
};

using Plane16 = Plane<std::int16_t>;  // HU-like
using Plane8 = Plane<std::uint8_t>;

inline constexpr int kHuMin = -1200;
inline constexpr int kHuMax = 600;

struct SceneSpec {
  std::size_t size = 96;
  std::size_t min_nodules = 1, max_nodules = 3;
  double min_radius = 2.0, max_radius = 6.0;  // pixels
  int body_hu = 40;
  int outside_hu = -1000;
  int lung_min_hu = -900, lung_max_hu = -800;
  int nodule_min_hu = -100, nodule_max_hu = 120;
  int vessel_min_hu = -450, vessel_max_hu = -250;
  std::size_t min_vessels = 2, max_vessels = 5;
  double vessel_through_nodule = 0.4;  // chance a vessel is routed across a nodule
  double noise_sigma = 30.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Sample {
  Plane16 raw;
  Plane8 image;  // preprocessed
  std::vector<GroundTruth> boxes;
};

/// Pure function of the SceneSpec: one lung field inside a soft-tissue body,
/// line-shaped vessels, bright disk nodules, additive Gaussian noise. Boxes
/// are the tight pixel bounds of each rasterized disk.
Sample generate_scene(const SceneSpec& spec);

int hu_clip(int hu);
Plane16 hu_clip(const Plane16& raw);

/// Affine [-1200, 600] -> [0, 255], nearest with ties away from zero, in
/// exact integer arithmetic. Throws DataError outside the clip range.
std::uint8_t normalize_255(int hu);
Plane8 normalize_255(const Plane16& clipped);

struct PreprocessOptions {
  int air_threshold = 113;  // 8-bit value; below = air (≈ -400 HU)
  std::size_t dilations = 7;
  bool mask = true;
};

/// hu_clip -> normalize_255 -> lung mask -> zero outside the mask.
Plane8 preprocess(const Plane16& raw, const PreprocessOptions& opts = {});

}  // namespace msdet
