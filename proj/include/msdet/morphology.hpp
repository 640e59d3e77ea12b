#pragma once

#include "msdet/data.hpp"

namespace msdet {

using Mask = Plane8;  // 0 / 1

Mask threshold_below(const Plane8& image, int threshold);

// 3×3 square structuring element; pixels outside the plane count as 0.
Mask erode(const Mask& m);
Mask dilate(const Mask& m);

/// Largest 4-connected foreground component; ties go to the component whose
/// first pixel comes first in raster order. All-zero input yields all-zero.
Mask largest_component(const Mask& m);

/// threshold -> erode -> largest component -> dilate `dilations` times.
/// Throws DataError when nothing lung-like survives.
Mask lung_mask(const Plane8& image, int air_threshold, std::size_t dilations);

Plane8 apply_mask(const Plane8& image, const Mask& m);

std::size_t count(const Mask& m);

}  // namespace msdet
