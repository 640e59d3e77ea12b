#include "msdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "msdet/morphology.hpp"
#include "msdet/nn.hpp"

namespace msdet {

namespace {

struct Ellipse {
  double cx, cy, a, b;
  // <= 1 inside
  double level(double x, double y) const {
    const double dx = (x - cx) / a;
    const double dy = (y - cy) / b;
    return dx * dx + dy * dy;
  }
};

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

struct Disk {
  double cx, cy, r;
  int hu;
};

}  // namespace

void SceneSpec::validate() const {
  auto bad = [](const std::string& m) { throw DataError("invalid scene spec: " + m); };
  if (size < 16) bad("image size must be >= 16");
  if (min_radius < 1.0) bad("nodule radius must be >= 1 px");
  if (min_radius > max_radius) bad("min_radius > max_radius");
  if (min_nodules > max_nodules) bad("min_nodules > max_nodules");
  if (min_vessels > max_vessels) bad("min_vessels > max_vessels");
  if (lung_min_hu > lung_max_hu || nodule_min_hu > nodule_max_hu || vessel_min_hu > vessel_max_hu) {
    bad("empty intensity range");
  }
  if (noise_sigma < 0) bad("noise_sigma < 0");
  if (vessel_through_nodule < 0 || vessel_through_nodule > 1) bad("vessel_through_nodule outside [0,1]");
  if (2.0 * (max_radius + 2.0) >= 0.6 * static_cast<double>(size)) bad("nodules too large for the lung field");
}

Sample generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uniform_int = [&](long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); };

  const std::size_t n = spec.size;
  const double s = static_cast<double>(n);
  const Ellipse body{s / 2, s / 2, 0.48 * s, 0.45 * s};
  const Ellipse lung{s / 2, s / 2, 0.40 * s, 0.35 * s};
  const double lung_hu = uniform(spec.lung_min_hu, spec.lung_max_hu);

  std::vector<Disk> disks;
  const auto count = static_cast<std::size_t>(uniform_int(static_cast<long>(spec.min_nodules),
                                                          static_cast<long>(spec.max_nodules)));
  for (std::size_t i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
      const double r = uniform(spec.min_radius, spec.max_radius);
      const double cx = uniform(0.0, s);
      const double cy = uniform(0.0, s);
      const Ellipse inner{lung.cx, lung.cy, lung.a - r - 2.0, lung.b - r - 2.0};
      if (inner.level(cx, cy) > 1.0) continue;
      bool clear = true;
      for (const auto& d : disks) {
        if (std::hypot(d.cx - cx, d.cy - cy) <= d.r + r + 3.0) clear = false;
      }
      if (!clear) continue;
      disks.push_back({cx, cy, r, static_cast<int>(uniform_int(spec.nodule_min_hu, spec.nodule_max_hu))});
      placed = true;
    }
    if (!placed) throw DataError("could not place nodule " + std::to_string(i) + " after 500 attempts");
  }

  struct Vessel {
    double ax, ay, bx, by, half;
    int hu;
  };
  std::vector<Vessel> vessels;
  const auto vcount = static_cast<std::size_t>(uniform_int(static_cast<long>(spec.min_vessels),
                                                           static_cast<long>(spec.max_vessels)));
  for (std::size_t i = 0; i < vcount; ++i) {
    const bool through = !disks.empty() && uniform(0.0, 1.0) < spec.vessel_through_nodule;
    double px, py;
    if (through) {
      const auto& d = disks[static_cast<std::size_t>(uniform_int(0, static_cast<long>(disks.size()) - 1))];
      px = d.cx;
      py = d.cy;
    } else {
      px = uniform(lung.cx - lung.a, lung.cx + lung.a);
      py = uniform(lung.cy - lung.b, lung.cy + lung.b);
    }
    const double theta = uniform(0.0, 3.141592653589793);
    const double len = uniform(0.2 * s, 0.5 * s);
    const double dx = 0.5 * len * std::cos(theta), dy = 0.5 * len * std::sin(theta);
    vessels.push_back({px - dx, py - dy, px + dx, py + dy, uniform(0.5, 1.0),
                       static_cast<int>(uniform_int(spec.vessel_min_hu, spec.vessel_max_hu))});
  }

  std::vector<double> hu(n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double v = spec.outside_hu;
      if (body.level(px, py) <= 1.0) v = spec.body_hu;
      if (lung.level(px, py) <= 1.0) {
        v = lung_hu;
        for (const auto& ve : vessels) {
          if (segment_distance(px, py, ve.ax, ve.ay, ve.bx, ve.by) <= ve.half) v = std::max(v, double(ve.hu));
        }
      }
      hu[y * n + x] = v;
    }
  }

  Sample out;
  for (const auto& d : disks) {
    long x0 = static_cast<long>(n), y0 = static_cast<long>(n), x1 = -1, y1 = -1;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        if (std::hypot(px - d.cx, py - d.cy) > d.r) continue;
        hu[y * n + x] = d.hu;
        x0 = std::min(x0, static_cast<long>(x));
        y0 = std::min(y0, static_cast<long>(y));
        x1 = std::max(x1, static_cast<long>(x));
        y1 = std::max(y1, static_cast<long>(y));
      }
    }
    out.boxes.push_back({0, BBox::from_corners(x0 / s, y0 / s, (x1 + 1) / s, (y1 + 1) / s)});
  }

  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);
  out.raw = Plane16(n, n);
  for (std::size_t i = 0; i < n * n; ++i) {
    double v = hu[i];
    if (spec.noise_sigma > 0) v += noise(rng);
    out.raw.data[i] = static_cast<std::int16_t>(std::clamp(std::lround(v), -32768L, 32767L));
  }
  out.image = preprocess(out.raw);
  return out;
}

int hu_clip(int hu) { return std::clamp(hu, kHuMin, kHuMax); }

Plane16 hu_clip(const Plane16& raw) {
  Plane16 out = raw;
  for (auto& v : out.data) v = static_cast<std::int16_t>(hu_clip(v));
  return out;
}

std::uint8_t normalize_255(int hu) {
  if (hu < kHuMin || hu > kHuMax) {
    throw DataError("normalize_255: value " + std::to_string(hu) + " outside [-1200, 600]; clip first");
  }
  const int span = kHuMax - kHuMin;
  const int num = (hu - kHuMin) * 255;  // >= 0, so half-up is ties-away
  int q = num / span;
  if (2 * (num % span) >= span) ++q;
  return static_cast<std::uint8_t>(q);
}

Plane8 normalize_255(const Plane16& clipped) {
  Plane8 out(clipped.width, clipped.height);
  for (std::size_t i = 0; i < clipped.data.size(); ++i) out.data[i] = normalize_255(clipped.data[i]);
  return out;
}

Plane8 preprocess(const Plane16& raw, const PreprocessOptions& opts) {
  Plane8 img = normalize_255(hu_clip(raw));
  if (!opts.mask) return img;
  return apply_mask(img, lung_mask(img, opts.air_threshold, opts.dilations));
}

}  // namespace msdet
