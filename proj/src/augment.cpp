#include "msdet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace msdet {

void hflip(Plane8& image, std::vector<GroundTruth>& boxes) {
  for (std::size_t y = 0; y < image.height; ++y) {
    std::reverse(image.data.begin() + static_cast<long>(y * image.width),
                 image.data.begin() + static_cast<long>((y + 1) * image.width));
  }
  for (auto& g : boxes) g.box.cx = 1.0 - g.box.cx;
}

void vflip(Plane8& image, std::vector<GroundTruth>& boxes) {
  Plane8 out(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) out.at(x, image.height - 1 - y) = image.at(x, y);
  }
  image = std::move(out);
  for (auto& g : boxes) g.box.cy = 1.0 - g.box.cy;
}

void rot90(Plane8& image, std::vector<GroundTruth>& boxes) {
  if (image.width != image.height) throw DataError("rot90 needs a square plane");
  const std::size_t n = image.width;
  Plane8 out(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) out.at(n - 1 - y, x) = image.at(x, y);
  }
  image = std::move(out);
  for (auto& g : boxes) {
    const BBox b = g.box;
    g.box = {1.0 - b.cy, b.cx, b.h, b.w};
  }
}

void augment(Plane8& image, std::vector<GroundTruth>& boxes, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Every draw happens unconditionally so the stream stays aligned.
  const double d_h = u(rng), d_v = u(rng), d_r = u(rng), d_b = u(rng), d_c = u(rng), d_sp = u(rng);
  if (d_h < cfg.p_hflip) hflip(image, boxes);
  if (d_v < cfg.p_vflip) vflip(image, boxes);
  if (cfg.rot90) {
    const int turns = std::min(3, static_cast<int>(d_r * 4.0));
    for (int i = 0; i < turns; ++i) rot90(image, boxes);
  }
  const double shift = (2.0 * d_b - 1.0) * cfg.brightness;
  const double gain = 1.0 + (2.0 * d_c - 1.0) * cfg.contrast;
  if (shift != 0.0 || gain != 1.0) {
    for (auto& v : image.data) {
      if (v == 0) continue;  // keep masked-out background at zero
      v = static_cast<std::uint8_t>(std::clamp(std::lround(gain * v + shift), 0L, 255L));
    }
  }
  if (d_sp < cfg.p_salt_pepper && cfg.salt_pepper_density > 0) {
    const auto hits = static_cast<std::size_t>(std::llround(cfg.salt_pepper_density * image.data.size()));
    std::uniform_int_distribution<std::size_t> pick(0, image.data.size() - 1);
    for (std::size_t i = 0; i < hits; ++i) {
      const std::size_t at = pick(rng);
      image.data[at] = u(rng) < 0.5 ? 0 : 255;
    }
  }
}

}  // namespace msdet
