#include "msdet/morphology.hpp"

#include <vector>

namespace msdet {

namespace {

template <bool Erode>
Mask morph(const Mask& m) {
  Mask out(m.width, m.height);
  const long w = static_cast<long>(m.width), h = static_cast<long>(m.height);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      bool all = true, any = false;
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
          const long xx = x + dx, yy = y + dy;
          const bool on = xx >= 0 && yy >= 0 && xx < w && yy < h &&
                          m.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy)) != 0;
          all = all && on;
          any = any || on;
        }
      }
      out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = (Erode ? all : any) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace

Mask threshold_below(const Plane8& image, int threshold) {
  Mask out(image.width, image.height);
  for (std::size_t i = 0; i < image.data.size(); ++i) out.data[i] = image.data[i] < threshold ? 1 : 0;
  return out;
}

Mask erode(const Mask& m) { return morph<true>(m); }
Mask dilate(const Mask& m) { return morph<false>(m); }

Mask largest_component(const Mask& m) {
  const std::size_t w = m.width, h = m.height;
  std::vector<int> label(w * h, -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < w * h; ++start) {
    if (!m.data[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t size = 0;
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t x = i % w, y = i / w;
      auto visit = [&](std::size_t j) {
        if (m.data[j] && label[j] < 0) {
          label[j] = id;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
    }
    sizes.push_back(size);
  }
  Mask out(w, h);
  if (sizes.empty()) return out;
  int best = 0;
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] > sizes[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  for (std::size_t i = 0; i < w * h; ++i) out.data[i] = label[i] == best ? 1 : 0;
  return out;
}

Mask lung_mask(const Plane8& image, int air_threshold, std::size_t dilations) {
  Mask m = largest_component(erode(threshold_below(image, air_threshold)));
  if (count(m) == 0) throw DataError("lung_mask: no lung-like region below threshold " + std::to_string(air_threshold));
  for (std::size_t i = 0; i < dilations; ++i) m = dilate(m);
  return m;
}

Plane8 apply_mask(const Plane8& image, const Mask& m) {
  if (image.width != m.width || image.height != m.height) throw DataError("apply_mask: size mismatch");
  Plane8 out = image;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (!m.data[i]) out.data[i] = 0;
  }
  return out;
}

std::size_t count(const Mask& m) {
  std::size_t c = 0;
  for (auto v : m.data) c += v != 0;
  return c;
}

}  // namespace msdet
