#pragma once

#include <vector>

#include "msdet/data.hpp"
#include "msdet/nn.hpp"

namespace msdet {

// Free-angle rotation is left out (boxes would need refitting) and color
// jitter reduces to intensity jitter on grayscale planes.
struct AugmentConfig {
  bool enabled = true;
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  bool rot90 = true;
  double brightness = 12.0;   // max additive shift, 8-bit units
  double contrast = 0.15;     // gain drawn from [1-c, 1+c]
  double p_salt_pepper = 0.3;
  double salt_pepper_density = 0.002;
};

void hflip(Plane8& image, std::vector<GroundTruth>& boxes);
void vflip(Plane8& image, std::vector<GroundTruth>& boxes);
/// Rotates a square plane 90° clockwise: pixel (x, y) moves to (H-1-y, x).
void rot90(Plane8& image, std::vector<GroundTruth>& boxes);

/// Applies the configured transforms in a fixed order with draws from rng.
void augment(Plane8& image, std::vector<GroundTruth>& boxes, const AugmentConfig& cfg, Rng& rng);

}  // namespace msdet
